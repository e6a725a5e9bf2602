#include "mebinncd/config_json.hpp"

#include "mebinncd/error.hpp"

namespace mebinncd {

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const char* what) {
    if (!j.is_object()) throw Error(ErrorKind::ConfigInvalid, std::string(what) + " must be a JSON object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* k : allowed) known |= item.key() == k;
        if (!known) throw Error(ErrorKind::ConfigInvalid, std::string("unknown key '") + item.key() + "' in " + what);
    }
}

namespace {

template <typename T>
void read(const nlohmann::json& j, const char* key, T& field, const char* what) {
    if (!j.contains(key)) return;
    try {
        field = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::ConfigInvalid, std::string(what) + "." + key + ": " + e.what());
    }
}

}  // namespace

void to_json(nlohmann::json& j, const MebinConfig& c) {
    j = {{"num_thresholds", c.num_thresholds},
         {"min_stable_run", c.min_stable_run},
         {"erosion_radius", c.erosion_radius},
         {"connectivity", static_cast<int>(c.connectivity)},
         {"reconstruct", c.reconstruct}};
}

void from_json(const nlohmann::json& j, MebinConfig& c) {
    constexpr const char* what = "mebin config";
    reject_unknown_keys(j, {"num_thresholds", "min_stable_run", "erosion_radius", "connectivity", "reconstruct"}, what);
    read(j, "num_thresholds", c.num_thresholds, what);
    read(j, "min_stable_run", c.min_stable_run, what);
    read(j, "erosion_radius", c.erosion_radius, what);
    int conn = static_cast<int>(c.connectivity);
    read(j, "connectivity", conn, what);
    c.connectivity = connectivity_from_int(conn);
    read(j, "reconstruct", c.reconstruct, what);
}

void to_json(nlohmann::json& j, const CropConfig& c) {
    j = {{"padding_frac", c.padding_frac},
         {"min_size_frac", c.min_size_frac},
         {"connectivity", static_cast<int>(c.connectivity)}};
}

void from_json(const nlohmann::json& j, CropConfig& c) {
    constexpr const char* what = "crop config";
    reject_unknown_keys(j, {"padding_frac", "min_size_frac", "connectivity"}, what);
    read(j, "padding_frac", c.padding_frac, what);
    read(j, "min_size_frac", c.min_size_frac, what);
    int conn = static_cast<int>(c.connectivity);
    read(j, "connectivity", conn, what);
    c.connectivity = connectivity_from_int(conn);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"input_side", c.input_side},
         {"patch_size", c.patch_size},
         {"embed_dim", c.embed_dim},
         {"num_heads", c.num_heads},
         {"num_layers", c.num_layers},
         {"masked_layers", c.masked_layers},
         {"num_known_classes", c.num_known_classes},
         {"num_novel_classes", c.num_novel_classes},
         {"projection_dim", c.projection_dim},
         {"num_heads_classifier", c.num_heads_classifier},
         {"mlp_ratio", c.mlp_ratio},
         {"mask_target", to_string(c.mask_target)}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    constexpr const char* what = "model config";
    reject_unknown_keys(j,
                        {"input_side", "patch_size", "embed_dim", "num_heads", "num_layers", "masked_layers",
                         "num_known_classes", "num_novel_classes", "projection_dim", "num_heads_classifier",
                         "mlp_ratio", "mask_target"},
                        what);
    read(j, "input_side", c.input_side, what);
    read(j, "patch_size", c.patch_size, what);
    read(j, "embed_dim", c.embed_dim, what);
    read(j, "num_heads", c.num_heads, what);
    read(j, "num_layers", c.num_layers, what);
    read(j, "masked_layers", c.masked_layers, what);
    read(j, "num_known_classes", c.num_known_classes, what);
    read(j, "num_novel_classes", c.num_novel_classes, what);
    read(j, "projection_dim", c.projection_dim, what);
    read(j, "num_heads_classifier", c.num_heads_classifier, what);
    read(j, "mlp_ratio", c.mlp_ratio, what);
    std::string target = to_string(c.mask_target);
    read(j, "mask_target", target, what);
    c.mask_target = mask_target_from_string(target);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"tau_u", c.tau_u},
         {"tau_c", c.tau_c},
         {"tau_s", c.tau_s},
         {"tau_t_start", c.tau_t_start},
         {"tau_t_end", c.tau_t_end},
         {"tau_t_warmup_epochs", c.tau_t_warmup_epochs},
         {"tau_t_step_every", c.tau_t_step_every},
         {"lambda", c.lambda},
         {"mu", c.mu},
         {"plc_threshold", c.plc_threshold},
         {"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"learning_rate", c.learning_rate},
         {"momentum", c.momentum},
         {"weight_decay", c.weight_decay},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    constexpr const char* what = "train config";
    reject_unknown_keys(j,
                        {"tau_u", "tau_c", "tau_s", "tau_t_start", "tau_t_end", "tau_t_warmup_epochs",
                         "tau_t_step_every", "lambda", "mu", "plc_threshold", "batch_size", "epochs",
                         "learning_rate", "momentum", "weight_decay", "seed"},
                        what);
    read(j, "tau_u", c.tau_u, what);
    read(j, "tau_c", c.tau_c, what);
    read(j, "tau_s", c.tau_s, what);
    read(j, "tau_t_start", c.tau_t_start, what);
    read(j, "tau_t_end", c.tau_t_end, what);
    read(j, "tau_t_warmup_epochs", c.tau_t_warmup_epochs, what);
    read(j, "tau_t_step_every", c.tau_t_step_every, what);
    read(j, "lambda", c.lambda, what);
    read(j, "mu", c.mu, what);
    read(j, "plc_threshold", c.plc_threshold, what);
    read(j, "batch_size", c.batch_size, what);
    read(j, "epochs", c.epochs, what);
    read(j, "learning_rate", c.learning_rate, what);
    read(j, "momentum", c.momentum, what);
    read(j, "weight_decay", c.weight_decay, what);
    read(j, "seed", c.seed, what);
}

void to_json(nlohmann::json& j, const MergeConfig& c) { j = {{"tau_alpha", c.tau_alpha}}; }

void from_json(const nlohmann::json& j, MergeConfig& c) {
    reject_unknown_keys(j, {"tau_alpha"}, "merge config");
    read(j, "tau_alpha", c.tau_alpha, "merge config");
}

void to_json(nlohmann::json& j, const NoiseConfig& c) {
    j = {{"fp_blob_rate", c.fp_blob_rate},
         {"miss_rate", c.miss_rate},
         {"blur_radius", c.blur_radius},
         {"score_jitter", c.score_jitter}};
}

void from_json(const nlohmann::json& j, NoiseConfig& c) {
    constexpr const char* what = "noise config";
    reject_unknown_keys(j, {"fp_blob_rate", "miss_rate", "blur_radius", "score_jitter"}, what);
    read(j, "fp_blob_rate", c.fp_blob_rate, what);
    read(j, "miss_rate", c.miss_rate, what);
    read(j, "blur_radius", c.blur_radius, what);
    read(j, "score_jitter", c.score_jitter, what);
}

namespace {

std::vector<std::string> class_names(const std::vector<ShapeClass>& v) {
    std::vector<std::string> out;
    for (ShapeClass c : v) out.push_back(to_string(c));
    return out;
}

std::vector<ShapeClass> class_list(const std::vector<std::string>& v) {
    std::vector<ShapeClass> out;
    for (const auto& s : v) out.push_back(shape_class_from_string(s));
    return out;
}

}  // namespace

void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = {{"image_side", c.image_side},
         {"num_unlabeled", c.num_unlabeled},
         {"num_labeled", c.num_labeled},
         {"novel_classes", class_names(c.novel_classes)},
         {"known_classes", class_names(c.known_classes)},
         {"noise", c.noise},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
    constexpr const char* what = "synth config";
    reject_unknown_keys(j, {"image_side", "num_unlabeled", "num_labeled", "novel_classes", "known_classes", "noise",
                            "seed"},
                        what);
    read(j, "image_side", c.image_side, what);
    read(j, "num_unlabeled", c.num_unlabeled, what);
    read(j, "num_labeled", c.num_labeled, what);
    std::vector<std::string> names;
    if (j.contains("novel_classes")) {
        read(j, "novel_classes", names, what);
        c.novel_classes = class_list(names);
    }
    if (j.contains("known_classes")) {
        read(j, "known_classes", names, what);
        c.known_classes = class_list(names);
    }
    if (j.contains("noise")) c.noise = j.at("noise").get<NoiseConfig>();
    read(j, "seed", c.seed, what);
}

}  // namespace mebinncd
