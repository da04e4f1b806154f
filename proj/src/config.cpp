#include "csasr/config.hpp"

#include <fstream>
#include <sstream>

namespace csasr {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

int to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValueError("config: " + key + " expects an integer, got '" + v + "'");
    }
}

long to_long(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long r = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValueError("config: " + key + " expects an integer, got '" + v + "'");
    }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const unsigned long long r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValueError("config: " + key + " expects an unsigned integer, got '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValueError("config: " + key + " expects a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ValueError("config: " + key + " expects true/false, got '" + v + "'");
}

}  // namespace

KeyValues parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw IoError("config: cannot read " + path);
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ValueError("config: line " + std::to_string(lineno) + " of " + path + " is not 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ValueError("config: empty key on line " + std::to_string(lineno) + " of " + path);
        kv[key] = value;
    }
    return kv;
}

void apply_override(KeyValues& kv, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ValueError("config: override '" + assignment + "' is not key=value");
    }
    kv[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

RunConfig make_run_config(const KeyValues& kv) {
    RunConfig rc;
    for (const auto& [key, v] : kv) {
        if (key == "model.scale") rc.model.scale = to_int(key, v);
        else if (key == "model.in_channels") rc.model.in_channels = to_int(key, v);
        else if (key == "model.feat_channels") rc.model.feat_channels = to_int(key, v);
        else if (key == "model.num_stages") rc.model.num_stages = to_int(key, v);
        else if (key == "model.nominal_lr_size") rc.model.nominal_lr_size = to_int(key, v);
        else if (key == "model.global_residual") rc.model.global_residual = to_bool(key, v);
        else if (key == "csa.reduction") rc.model.csa.reduction = to_int(key, v);
        else if (key == "csa.spatial_kernel") rc.model.csa.spatial_kernel = to_int(key, v);
        else if (key == "csa.stage_residual") rc.model.csa.stage_residual = to_bool(key, v);
        else if (key == "transformer.patch_h") rc.model.transformer.patch_h = to_int(key, v);
        else if (key == "transformer.patch_w") rc.model.transformer.patch_w = to_int(key, v);
        else if (key == "transformer.embed_dim") rc.model.transformer.embed_dim = to_int(key, v);
        else if (key == "transformer.num_heads") rc.model.transformer.num_heads = to_int(key, v);
        else if (key == "transformer.num_encoders") rc.model.transformer.num_encoders = to_int(key, v);
        else if (key == "transformer.num_decoders") rc.model.transformer.num_decoders = to_int(key, v);
        else if (key == "transformer.sgfn_expand") rc.model.transformer.sgfn_expand = to_int(key, v);
        else if (key == "transformer.positional") rc.model.transformer.use_positional_embedding = to_bool(key, v);
        else if (key == "train.lr") rc.train.lr = to_double(key, v);
        else if (key == "train.beta1") rc.train.beta1 = to_double(key, v);
        else if (key == "train.beta2") rc.train.beta2 = to_double(key, v);
        else if (key == "train.eps") rc.train.eps = to_double(key, v);
        else if (key == "train.epochs") rc.train.epochs = to_int(key, v);
        else if (key == "train.batch") rc.train.batch_override = to_int(key, v);
        else if (key == "train.seed") rc.train.seed = to_u64(key, v);
        else if (key == "train.patch_hr") rc.train.patch_hr = to_int(key, v);
        else if (key == "train.eval_interval") rc.train.eval_interval = to_int(key, v);
        else if (key == "train.checkpoint_dir") rc.train.checkpoint_dir = v;
        else if (key == "train.max_steps") rc.train.max_steps = to_long(key, v);
        else if (key == "data.root") rc.data_root = v;
        else throw ValueError("config: unknown key '" + key + "'");
    }
    // The attention trunk width always follows the feature trunk.
    rc.model.csa.channels = rc.model.feat_channels;
    return rc;
}

}  // namespace csasr
