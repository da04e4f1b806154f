#include "csasr/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace csasr {

TensorPtr<float> image_to_tensor(const ImageF32& img) {
    auto t = zeros<float>({1, static_cast<std::size_t>(img.channels), static_cast<std::size_t>(img.height),
                           static_cast<std::size_t>(img.width)});
    std::copy(img.samples.begin(), img.samples.end(), t->data.begin());
    return t;
}

ImageF32 tensor_to_image(const TensorPtr<float>& t) {
    if (t->rank() != 4 || t->shape[0] != 1) {
        throw ShapeError("tensor_to_image: expected (1,C,H,W), got " + shape_str(t->shape));
    }
    ImageF32 img;
    img.channels = static_cast<int>(t->shape[1]);
    img.height = static_cast<int>(t->shape[2]);
    img.width = static_cast<int>(t->shape[3]);
    img.samples.assign(t->data.begin(), t->data.end());
    return img;
}

namespace {

ImageF32 pad_edge_to_multiple(const ImageF32& img, int mult_h, int mult_w) {
    const int ph = (mult_h - img.height % mult_h) % mult_h;
    const int pw = (mult_w - img.width % mult_w) % mult_w;
    if (ph == 0 && pw == 0) return img;
    ImageF32 out;
    out.channels = img.channels;
    out.height = img.height + ph;
    out.width = img.width + pw;
    out.samples.resize(static_cast<std::size_t>(out.channels) * out.height * out.width);
    for (int c = 0; c < out.channels; ++c)
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x)
                out.at(c, y, x) = img.at(c, std::min(y, img.height - 1), std::min(x, img.width - 1));
    return out;
}

TensorPtr<float> stack_batch(const std::vector<SamplePair>& batch, bool hr_side) {
    const ImageF32& first = hr_side ? batch.front().hr : batch.front().lr;
    auto t = zeros<float>({batch.size(), static_cast<std::size_t>(first.channels),
                           static_cast<std::size_t>(first.height), static_cast<std::size_t>(first.width)});
    const std::size_t per = first.samples.size();
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const ImageF32& img = hr_side ? batch[b].hr : batch[b].lr;
        if (img.samples.size() != per) throw ShapeError("train: inconsistent batch sample shapes");
        std::copy(img.samples.begin(), img.samples.end(), t->data.begin() + b * per);
    }
    return t;
}

}  // namespace

ImageF32 super_resolve(const Model<float>& model, const ImageF32& lr) {
    const auto& tc = model.cfg.transformer;
    ImageF32 padded = pad_edge_to_multiple(lr, tc.patch_h, tc.patch_w);
    auto out = model.forward(image_to_tensor(padded), nullptr);
    ImageF32 sr = tensor_to_image(out);
    sr = crop(sr, 0, 0, lr.height * model.cfg.scale, lr.width * model.cfg.scale);
    for (auto& v : sr.samples) v = std::clamp(v, 0.0f, 1.0f);
    return sr;
}

TrainResult run_training(Model<float>& model, TrainState& state, const DatasetIndex& index, const SplitSpec& split,
                         const TrainConfig& cfg, const std::string& log_path, const std::string& ckpt_dir) {
    cfg.validate();
    if (split.train.empty()) throw ValueError("train: empty training split");
    const int scale = model.cfg.scale;
    const int batch = cfg.batch_for(scale);
    const int lr_patch = cfg.patch_hr / scale;
    if (cfg.patch_hr % scale != 0) {
        throw ValueError("train: patch_hr=" + std::to_string(cfg.patch_hr) + " not divisible by scale");
    }
    if (lr_patch % model.cfg.transformer.patch_h != 0 || lr_patch % model.cfg.transformer.patch_w != 0) {
        throw ValueError("train: patch_hr/scale=" + std::to_string(lr_patch) +
                         " must be a multiple of the transformer patch size");
    }

    std::ofstream log;
    if (!log_path.empty()) {
        const bool fresh = !std::filesystem::exists(log_path) || state.epoch == 0;
        log.open(log_path, fresh ? std::ios::trunc : std::ios::app);
        if (!log.good()) throw IoError("train: cannot open log " + log_path);
        if (fresh) log << "iter,epoch,loss,lr,elapsed_s\n";
    }

    TrainResult result;
    result.best_val_psnr = state.best_val_psnr;
    const long iters_per_epoch = std::max<long>(1, static_cast<long>(split.train.size()) / batch);
    long iter = static_cast<long>(state.epoch) * iters_per_epoch;
    const auto t_start = std::chrono::steady_clock::now();
    bool stop = false;

    while (state.epoch < cfg.epochs && !stop) {
        const int epoch = state.epoch + 1;
        for (long k = 0; k < iters_per_epoch && !stop; ++k) {
            auto pairs = next_batch(index, split.train, scale, cfg.patch_hr, batch, state.rng);
            auto lr_batch = stack_batch(pairs, false);
            auto hr_batch = stack_batch(pairs, true);

            Tape<float> tape;
            auto sr = model.forward(lr_batch, &tape);
            auto loss = l1_loss(sr, hr_batch, &tape);
            const float loss_v = loss->data[0];
            if (!std::isfinite(loss_v)) {
                std::ostringstream os;
                os << "train: non-finite loss at iter " << iter + 1 << "; gradient norms:";
                for (const auto& [name, p] : model.params.items()) {
                    double norm = 0;
                    if (p->has_grad())
                        for (float g : p->grad) norm += static_cast<double>(g) * g;
                    os << "\n  " << name << " " << std::sqrt(norm);
                }
                throw ValueError(os.str());
            }
            tape.backward(loss);
            adam_step(model.params, state.opt, cfg);

            ++iter;
            const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
            result.rows.push_back({iter, epoch, loss_v, cfg.lr, elapsed});
            if (log.is_open()) {
                log << iter << ',' << epoch << ',' << std::setprecision(9) << loss_v << ','
                    << std::setprecision(17) << cfg.lr << ',' << std::setprecision(6) << elapsed << '\n';
            }
            if (cfg.max_steps > 0 && iter >= cfg.max_steps) stop = true;
        }
        state.epoch = epoch;
        ++result.epochs_run;

        const bool boundary = (epoch % cfg.eval_interval == 0) || epoch == cfg.epochs || stop;
        if (boundary) {
            if (!split.val.empty()) {
                auto report = evaluate_model(model, index, split.val, scale);
                std::cerr << "epoch " << epoch << ": val psnr " << report.overall.psnr_mean << " dB, ssim "
                          << report.overall.ssim_mean << "\n";
                if (static_cast<float>(report.overall.psnr_mean) > state.best_val_psnr) {
                    state.best_val_psnr = static_cast<float>(report.overall.psnr_mean);
                    if (!ckpt_dir.empty()) {
                        save_checkpoint((std::filesystem::path(ckpt_dir) / "best.ckpt").string(), model, state, cfg);
                    }
                }
            }
            if (!ckpt_dir.empty()) {
                save_checkpoint((std::filesystem::path(ckpt_dir) / "last.ckpt").string(), model, state, cfg);
            }
        }
    }
    result.best_val_psnr = state.best_val_psnr;
    return result;
}

namespace {

EvalReport evaluate_common(const DatasetIndex& index, const std::vector<std::size_t>& split, int scale,
                           const std::function<ImageF32(const ImageF32&)>& upscaler) {
    struct Acc {
        double psnr_sum = 0, ssim_sum = 0;
        int count = 0, inf = 0, failures = 0;
    };
    std::map<std::string, Acc> by_class;
    for (const auto& cls : index.class_names) by_class[cls];

    for (std::size_t id : split) {
        const auto& entry = index.entries[id];
        Acc& acc = by_class[entry.class_name];
        try {
            ImageF32 full = to_f32(load_image(entry.path));
            SamplePair pair = degrade(full, scale);
            ImageF32 sr = upscaler(pair.lr);
            const double p = psnr(sr, pair.hr, 1.0);
            const double s = ssim(sr, pair.hr);
            if (std::isinf(p)) {
                ++acc.inf;
                acc.ssim_sum += s;
            } else {
                acc.psnr_sum += p;
                acc.ssim_sum += s;
                ++acc.count;
            }
        } catch (const std::exception& e) {
            std::cerr << "eval: skipping " << entry.path << ": " << e.what() << "\n";
            ++acc.failures;
        }
    }

    EvalReport report;
    Acc total;
    for (const auto& cls : index.class_names) {
        const Acc& a = by_class[cls];
        if (a.count + a.inf + a.failures == 0) continue;
        EvalRow row;
        row.cls = cls;
        row.count = a.count + a.inf;
        row.psnr_mean = a.count ? a.psnr_sum / a.count : kPsnrInf;
        row.ssim_mean = row.count ? a.ssim_sum / row.count : 0.0;
        row.psnr_inf = a.inf;
        row.failures = a.failures;
        report.per_class.push_back(row);
        total.psnr_sum += a.psnr_sum;
        total.ssim_sum += a.ssim_sum;
        total.count += a.count;
        total.inf += a.inf;
        total.failures += a.failures;
    }
    report.overall.cls = "all";
    report.overall.count = total.count + total.inf;
    report.overall.psnr_mean = total.count ? total.psnr_sum / total.count : kPsnrInf;
    report.overall.ssim_mean = report.overall.count ? total.ssim_sum / report.overall.count : 0.0;
    report.overall.psnr_inf = total.inf;
    report.overall.failures = total.failures;
    if (total.inf > 0) {
        std::cerr << "eval: " << total.inf << " image(s) had zero error; +inf PSNR excluded from the mean\n";
    }
    return report;
}

}  // namespace

EvalReport evaluate_model(const Model<float>& model, const DatasetIndex& index, const std::vector<std::size_t>& split,
                          int scale) {
    if (scale != model.cfg.scale) {
        throw ValueError("eval: requested scale " + std::to_string(scale) + " but the model was built for " +
                         std::to_string(model.cfg.scale));
    }
    return evaluate_common(index, split, scale, [&model](const ImageF32& lr) { return super_resolve(model, lr); });
}

EvalReport evaluate_bicubic(const DatasetIndex& index, const std::vector<std::size_t>& split, int scale) {
    return evaluate_common(index, split, scale, [scale](const ImageF32& lr) {
        ImageF32 up = bicubic_resize(lr, lr.height * scale, lr.width * scale);
        for (auto& v : up.samples) v = std::clamp(v, 0.0f, 1.0f);
        return up;
    });
}

void write_report_csv(const EvalReport& report, std::ostream& os) {
    os << "class,count,psnr_mean,ssim_mean\n";
    auto row = [&os](const EvalRow& r) {
        os << r.cls << ',' << r.count << ',' << std::setprecision(10) << r.psnr_mean << ','
           << std::setprecision(10) << r.ssim_mean << '\n';
    };
    for (const auto& r : report.per_class) row(r);
    row(report.overall);
}

void print_report_pretty(const EvalReport& report, std::ostream& os) {
    os << std::left << std::setw(24) << "class" << std::right << std::setw(8) << "count" << std::setw(12) << "psnr"
       << std::setw(12) << "ssim" << "\n";
    auto row = [&os](const EvalRow& r) {
        os << std::left << std::setw(24) << r.cls << std::right << std::setw(8) << r.count << std::setw(12)
           << std::fixed << std::setprecision(4) << r.psnr_mean << std::setw(12) << r.ssim_mean << "\n";
        os.unsetf(std::ios::fixed);
    };
    for (const auto& r : report.per_class) row(r);
    row(report.overall);
}

}  // namespace csasr
