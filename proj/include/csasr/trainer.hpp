#pragma once

#include <string>
#include <vector>

#include "csasr/dataset.hpp"
#include "csasr/model.hpp"

namespace csasr {

struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    int epochs = 1500;
    int batch_x2 = 10;  // per-scale batch sizes
    int batch_x3 = 8;
    int batch_x4 = 6;
    int batch_override = 0;  // 0 = use the per-scale default
    std::uint64_t seed = 0;
    int patch_hr = 96;
    int eval_interval = 50;  // epochs between validation passes / checkpoints
    std::string checkpoint_dir;
    long max_steps = 0;  // 0 = unlimited; smoke tests cap iterations

    int batch_for(int scale) const {
        if (batch_override > 0) return batch_override;
        switch (scale) {
            case 2: return batch_x2;
            case 3: return batch_x3;
            case 4: return batch_x4;
            default: throw ValueError("train: no batch size for scale " + std::to_string(scale));
        }
    }

    void validate() const {
        if (lr <= 0) throw ValueError("train: lr must be > 0");
        if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1) {
            throw ValueError("train: beta1/beta2 must lie in (0,1)");
        }
        if (eps <= 0) throw ValueError("train: eps must be > 0");
        if (epochs < 0) throw ValueError("train: epochs must be >= 0");
        if (patch_hr < 1) throw ValueError("train: patch_hr must be >= 1");
        if (eval_interval < 1) throw ValueError("train: eval_interval must be >= 1");
    }
};

/// Adam moments, aligned index-for-index with the ParamSet.
template <typename T>
struct AdamState {
    std::vector<TensorPtr<T>> m;
    std::vector<TensorPtr<T>> v;
    long long t = 0;

    static AdamState<T> init(const ParamSet<T>& params) {
        AdamState<T> s;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const auto& [name, p] : params.items()) {
            s.m.push_back(zeros<T>(p->shape));
            s.v.push_back(zeros<T>(p->shape));
        }
        return s;
    }
};

/// One Adam update with bias correction; gradients are cleared afterward.
template <typename T>
void adam_step(ParamSet<T>& params, AdamState<T>& state, const TrainConfig& cfg) {
    if (state.m.size() != params.size()) throw ValueError("adam: state does not match parameter set");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& [name, p] = params.items()[k];
        if (!p->has_grad()) throw ValueError("adam: parameter '" + name + "' has no gradient");
        auto& m = state.m[k]->data;
        auto& v = state.v[k]->data;
        for (std::size_t i = 0; i < p->numel(); ++i) {
            const double g = static_cast<double>(p->grad[i]);
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            p->data[i] = static_cast<T>(static_cast<double>(p->data[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
        p->zero_grad();
    }
}

struct LogRow {
    long iter;
    int epoch;
    float loss;
    double lr;
    double elapsed_s;
};

struct TrainResult {
    std::vector<LogRow> rows;
    float best_val_psnr = -1.0f;
    int epochs_run = 0;
};

/// Mutable training-run state; checkpoints capture and restore it so a
/// resumed run continues the exact trace of an uninterrupted one.
struct TrainState {
    AdamState<float> opt;
    Rng rng;
    int epoch = 0;
    float best_val_psnr = -1.0f;
};

struct EvalRow {
    std::string cls;
    int count = 0;
    double psnr_mean = 0.0;
    double ssim_mean = 0.0;
    int psnr_inf = 0;   // identical pairs, excluded from the mean
    int failures = 0;
};

struct EvalReport {
    std::vector<EvalRow> per_class;
    EvalRow overall;
};

// --- training / evaluation pipeline (float) -------------------------------

TensorPtr<float> image_to_tensor(const ImageF32& img);
ImageF32 tensor_to_image(const TensorPtr<float>& t);

/// Runs the model on one LR image: pads to a patch multiple by edge
/// replication, forwards without a tape, crops back and clamps to [0,1].
ImageF32 super_resolve(const Model<float>& model, const ImageF32& lr);

TrainResult run_training(Model<float>& model, TrainState& state, const DatasetIndex& index, const SplitSpec& split,
                         const TrainConfig& cfg, const std::string& log_path = "", const std::string& ckpt_dir = "");

EvalReport evaluate_model(const Model<float>& model, const DatasetIndex& index, const std::vector<std::size_t>& split,
                          int scale);
EvalReport evaluate_bicubic(const DatasetIndex& index, const std::vector<std::size_t>& split, int scale);

void write_report_csv(const EvalReport& report, std::ostream& os);
void print_report_pretty(const EvalReport& report, std::ostream& os);

// --- checkpoints -----------------------------------------------------------

inline constexpr char kCheckpointMagic[5] = {'C', 'S', 'A', 'S', 'R'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Model<float>& model, const TrainState& state,
                     const TrainConfig& tcfg);

struct LoadedCheckpoint {
    ModelConfig model_cfg;
    TrainConfig train_cfg;
    int epoch = 0;
    std::string rng_state;
    float best_val_psnr = -1.0f;
    Model<float> model;  // parameters restored
    TrainState state;    // optimizer moments, rng, epoch restored
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace csasr
