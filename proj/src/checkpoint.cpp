#include <cstring>
#include <fstream>

#include "mebinncd/config_json.hpp"
#include "mebinncd/error.hpp"
#include "mebinncd/mgvit.hpp"

// Layout: 8-byte magic, u32 version, u64 header length, JSON header, then for
// every tensor: u32 name length, name, u32 rows, u32 cols, rows*cols f64.
// All integers and doubles are little-endian.

namespace mebinncd {

namespace {

constexpr char kMagic[8] = {'M', 'E', 'B', 'N', 'C', 'D', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
        throw Error(ErrorKind::MalformedHeader, "truncated checkpoint " + path.string());
    return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write checkpoint " + path.string());
    const nlohmann::json header = {{"model", ckpt.params.config},
                                   {"inference_head", ckpt.inference_head},
                                   {"tau_s", ckpt.tau_s},
                                   {"num_values", ckpt.params.values.size()}};
    const std::string text = header.dump();
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& spec : ckpt.params.layout().specs()) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(spec.name.size()));
        out.write(spec.name.data(), static_cast<std::streamsize>(spec.name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(spec.rows));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(spec.cols));
        out.write(reinterpret_cast<const char*>(ckpt.params.values.data() + spec.offset),
                  static_cast<std::streamsize>(spec.size() * sizeof(double)));
    }
    if (!out) throw Error(ErrorKind::IoFailure, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::MissingFile, "cannot open checkpoint " + path.string());
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw Error(ErrorKind::MalformedHeader, "not a checkpoint: " + path.string());
    if (get<std::uint32_t>(in, path) != kVersion)
        throw Error(ErrorKind::MalformedHeader, "unsupported checkpoint version in " + path.string());
    const auto length = get<std::uint64_t>(in, path);
    if (length > (1u << 24)) throw Error(ErrorKind::MalformedHeader, "checkpoint header too large");
    std::string text(length, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(length)))
        throw Error(ErrorKind::MalformedHeader, "truncated checkpoint header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedHeader, std::string("checkpoint header: ") + e.what());
    }
    const ModelConfig cfg = header.at("model").get<ModelConfig>();
    Checkpoint ckpt{ModelParams(cfg), header.at("inference_head").get<int>(), header.at("tau_s").get<double>()};
    if (header.at("num_values").get<std::size_t>() != ckpt.params.values.size())
        throw Error(ErrorKind::ConfigMismatch, "checkpoint parameter count does not match its model config");
    for (const auto& spec : ckpt.params.layout().specs()) {
        const auto name_len = get<std::uint32_t>(in, path);
        if (name_len > 256) throw Error(ErrorKind::MalformedHeader, "tensor name too long");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto rows = get<std::uint32_t>(in, path);
        const auto cols = get<std::uint32_t>(in, path);
        if (name != spec.name || static_cast<int>(rows) != spec.rows || static_cast<int>(cols) != spec.cols)
            throw Error(ErrorKind::ConfigMismatch, "tensor '" + name + "' does not match layout entry '" +
                                                       spec.name + "'");
        if (!in.read(reinterpret_cast<char*>(ckpt.params.values.data() + spec.offset),
                     static_cast<std::streamsize>(spec.size() * sizeof(double))))
            throw Error(ErrorKind::MalformedHeader, "truncated tensor '" + name + "'");
    }
    if (ckpt.inference_head < 0 || ckpt.inference_head >= cfg.num_heads_classifier)
        throw Error(ErrorKind::ConfigMismatch, "inference head out of range");
    return ckpt;
}

}  // namespace mebinncd
