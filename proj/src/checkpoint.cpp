#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "csasr/trainer.hpp"

namespace csasr {

namespace {

using Json = nlohmann::ordered_json;

Json model_cfg_to_json(const ModelConfig& c) {
    Json j;
    j["scale"] = c.scale;
    j["in_channels"] = c.in_channels;
    j["feat_channels"] = c.feat_channels;
    j["num_stages"] = c.num_stages;
    j["nominal_lr_size"] = c.nominal_lr_size;
    j["global_residual"] = c.global_residual;
    j["csa"] = {{"channels", c.csa.channels},
                {"reduction", c.csa.reduction},
                {"spatial_kernel", c.csa.spatial_kernel},
                {"stage_residual", c.csa.stage_residual}};
    j["transformer"] = {{"patch_h", c.transformer.patch_h},
                        {"patch_w", c.transformer.patch_w},
                        {"embed_dim", c.transformer.embed_dim},
                        {"num_heads", c.transformer.num_heads},
                        {"num_encoders", c.transformer.num_encoders},
                        {"num_decoders", c.transformer.num_decoders},
                        {"sgfn_expand", c.transformer.sgfn_expand},
                        {"positional", c.transformer.use_positional_embedding}};
    return j;
}

ModelConfig model_cfg_from_json(const Json& j) {
    ModelConfig c;
    c.scale = j.at("scale");
    c.in_channels = j.at("in_channels");
    c.feat_channels = j.at("feat_channels");
    c.num_stages = j.at("num_stages");
    c.nominal_lr_size = j.at("nominal_lr_size");
    c.global_residual = j.at("global_residual");
    const auto& cs = j.at("csa");
    c.csa.channels = cs.at("channels");
    c.csa.reduction = cs.at("reduction");
    c.csa.spatial_kernel = cs.at("spatial_kernel");
    c.csa.stage_residual = cs.at("stage_residual");
    const auto& tr = j.at("transformer");
    c.transformer.patch_h = tr.at("patch_h");
    c.transformer.patch_w = tr.at("patch_w");
    c.transformer.embed_dim = tr.at("embed_dim");
    c.transformer.num_heads = tr.at("num_heads");
    c.transformer.num_encoders = tr.at("num_encoders");
    c.transformer.num_decoders = tr.at("num_decoders");
    c.transformer.sgfn_expand = tr.at("sgfn_expand");
    c.transformer.use_positional_embedding = tr.at("positional");
    return c;
}

Json train_cfg_to_json(const TrainConfig& c) {
    Json j;
    j["lr"] = c.lr;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["eps"] = c.eps;
    j["epochs"] = c.epochs;
    j["batch_x2"] = c.batch_x2;
    j["batch_x3"] = c.batch_x3;
    j["batch_x4"] = c.batch_x4;
    j["batch_override"] = c.batch_override;
    j["seed"] = c.seed;
    j["patch_hr"] = c.patch_hr;
    j["eval_interval"] = c.eval_interval;
    j["max_steps"] = c.max_steps;
    return j;
}

TrainConfig train_cfg_from_json(const Json& j) {
    TrainConfig c;
    c.lr = j.at("lr");
    c.beta1 = j.at("beta1");
    c.beta2 = j.at("beta2");
    c.eps = j.at("eps");
    c.epochs = j.at("epochs");
    c.batch_x2 = j.at("batch_x2");
    c.batch_x3 = j.at("batch_x3");
    c.batch_x4 = j.at("batch_x4");
    c.batch_override = j.at("batch_override");
    c.seed = j.at("seed");
    c.patch_hr = j.at("patch_hr");
    c.eval_interval = j.at("eval_interval");
    c.max_steps = j.at("max_steps");
    return c;
}

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (is.gcount() != 8) throw IoError("checkpoint: truncated file (length field)");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

void write_blob(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_blob(std::istream& is) {
    const std::uint64_t n = read_u64(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::uint64_t>(is.gcount()) != n) throw IoError("checkpoint: truncated header");
    return s;
}

void write_f32(std::ostream& os, const std::vector<float>& v) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

void read_f32(std::istream& is, std::vector<float>& v) {
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (static_cast<std::size_t>(is.gcount()) != v.size() * sizeof(float)) {
        throw IoError("checkpoint: truncated tensor data");
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const Model<float>& model, const TrainState& state,
                     const TrainConfig& tcfg) {
    const auto dir = std::filesystem::path(path).parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os.good()) throw IoError("checkpoint: cannot write " + path);

    os.write(kCheckpointMagic, 5);
    os.put(static_cast<char>(kCheckpointVersion));

    Json header;
    header["model"] = model_cfg_to_json(model.cfg);
    header["train"] = train_cfg_to_json(tcfg);
    header["epoch"] = state.epoch;
    header["rng_state"] = state.rng.state();
    header["best_val_psnr"] = state.best_val_psnr;
    Json params = Json::array();
    for (const auto& [name, t] : model.params.items()) {
        params.push_back({{"name", name}, {"dtype", "f32"}, {"shape", t->shape}});
    }
    header["params"] = std::move(params);
    write_blob(os, header.dump());
    for (const auto& [name, t] : model.params.items()) write_f32(os, t->data);

    // Optimizer moments appended in the same scheme.
    Json mom_header;
    mom_header["t"] = state.opt.t;
    Json entries = Json::array();
    for (const auto& [name, t] : model.params.items()) {
        entries.push_back({{"name", "m." + name}, {"dtype", "f32"}, {"shape", t->shape}});
        entries.push_back({{"name", "v." + name}, {"dtype", "f32"}, {"shape", t->shape}});
    }
    mom_header["moments"] = std::move(entries);
    write_blob(os, mom_header.dump());
    for (std::size_t k = 0; k < model.params.size(); ++k) {
        write_f32(os, state.opt.m[k]->data);
        write_f32(os, state.opt.v[k]->data);
    }
    if (!os.good()) throw IoError("checkpoint: write failure on " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is.good()) throw IoError("checkpoint: cannot read " + path);

    char magic[5];
    is.read(magic, 5);
    if (is.gcount() != 5 || std::memcmp(magic, kCheckpointMagic, 5) != 0) {
        throw IoError("checkpoint: bad magic in " + path);
    }
    const int version = is.get();
    if (version != kCheckpointVersion) {
        throw IoError("checkpoint: format version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
    }

    Json header;
    try {
        header = Json::parse(read_blob(is));
    } catch (const Json::exception& e) {
        throw IoError("checkpoint: malformed header: " + std::string(e.what()));
    }

    LoadedCheckpoint ck;
    ck.model_cfg = model_cfg_from_json(header.at("model"));
    ck.train_cfg = train_cfg_from_json(header.at("train"));
    ck.epoch = header.at("epoch");
    ck.rng_state = header.at("rng_state");
    ck.best_val_psnr = header.at("best_val_psnr");

    // Rebuild the parameter set from the stored config, then check the
    // stored table against it; a mismatch means the checkpoint does not
    // belong to this configuration.
    ck.model = build_model<float>(ck.model_cfg, 0);
    const auto& items = ck.model.params.items();
    const auto& table = header.at("params");
    if (table.size() != items.size()) {
        throw IoError("checkpoint: expected " + std::to_string(items.size()) + " parameters from the config, file has " +
                      std::to_string(table.size()));
    }
    for (std::size_t k = 0; k < items.size(); ++k) {
        const std::string name = table[k].at("name");
        const Shape shape = table[k].at("shape").get<Shape>();
        if (name != items[k].first || shape != items[k].second->shape) {
            throw IoError("checkpoint: parameter mismatch at index " + std::to_string(k) + ": file has '" + name +
                          "' " + shape_str(shape) + ", config expects '" + items[k].first + "' " +
                          shape_str(items[k].second->shape));
        }
        if (table[k].at("dtype") != "f32") throw IoError("checkpoint: unsupported dtype for " + name);
    }
    for (auto& [name, t] : ck.model.params.items()) read_f32(is, t->data);

    Json mom_header;
    try {
        mom_header = Json::parse(read_blob(is));
    } catch (const Json::exception& e) {
        throw IoError("checkpoint: malformed moment header: " + std::string(e.what()));
    }
    ck.state.opt = AdamState<float>::init(ck.model.params);
    ck.state.opt.t = mom_header.at("t");
    const auto& moments = mom_header.at("moments");
    if (moments.size() != 2 * items.size()) throw IoError("checkpoint: moment table size mismatch");
    for (std::size_t k = 0; k < items.size(); ++k) {
        read_f32(is, ck.state.opt.m[k]->data);
        read_f32(is, ck.state.opt.v[k]->data);
    }
    ck.state.epoch = ck.epoch;
    ck.state.best_val_psnr = ck.best_val_psnr;
    ck.state.rng.restore(ck.rng_state);
    return ck;
}

}  // namespace csasr
