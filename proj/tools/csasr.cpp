#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "csasr/config.hpp"
#include "csasr/suites.hpp"
#include "csasr/trainer.hpp"

namespace fs = std::filesystem;
using namespace csasr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

RunConfig assemble_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    KeyValues kv;
    if (!config_path.empty()) kv = parse_config_file(config_path);
    for (const auto& o : overrides) apply_override(kv, o);
    return make_run_config(kv);
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& data_root,
              const std::string& out_dir, const std::string& resume, int scale, long seed) {
    RunConfig rc = assemble_config(config_path, overrides);
    if (scale > 0) {
        rc.model.scale = scale;
    }
    if (seed >= 0) rc.train.seed = static_cast<std::uint64_t>(seed);
    if (!data_root.empty()) rc.data_root = data_root;
    if (rc.data_root.empty()) throw ValueError("train: no dataset root (data.root or --data)");
    const std::string ckpt_dir = out_dir.empty() ? (rc.train.checkpoint_dir.empty() ? "runs" : rc.train.checkpoint_dir)
                                                 : out_dir;
    fs::create_directories(ckpt_dir);

    auto index = scan_dataset(rc.data_root);
    SplitSpec split;
    const std::string split_path = (fs::path(ckpt_dir) / "split.txt").string();

    Model<float> model;
    TrainState state;
    if (!resume.empty()) {
        auto ck = load_checkpoint(resume);
        model = std::move(ck.model);
        state = std::move(ck.state);
        rc.train = ck.train_cfg;
        split = fs::exists(split_path) ? load_split(split_path, index) : make_splits(index, rc.train.seed);
        std::cerr << "resumed from " << resume << " at epoch " << state.epoch << "\n";
    } else {
        // The positional tables are sized for the training crop.
        rc.model.nominal_lr_size = rc.train.patch_hr / rc.model.scale;
        model = build_model<float>(rc.model, rc.train.seed);
        state.opt = AdamState<float>::init(model.params);
        state.rng = Rng(rc.train.seed + 0x5eedULL);
        split = make_splits(index, rc.train.seed);
        save_split(split_path, index, split);
    }

    const std::string log_path = (fs::path(ckpt_dir) / "train_log.csv").string();
    auto result = run_training(model, state, index, split, rc.train, log_path, ckpt_dir);
    std::cout << "trained " << result.epochs_run << " epoch(s), " << result.rows.size() << " iteration(s)";
    if (!result.rows.empty()) std::cout << ", final loss " << result.rows.back().loss;
    std::cout << "\nbest validation psnr: " << result.best_val_psnr << " dB\n";
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_root, const std::string& baseline,
             const std::string& split_name, const std::string& split_file, const std::string& out_csv, int scale,
             long seed, bool pretty) {
    if (data_root.empty()) throw ValueError("eval: --data is required");
    auto index = scan_dataset(data_root);

    SplitSpec split;
    if (!split_file.empty()) {
        split = load_split(split_file, index);
    } else {
        split = make_splits(index, seed >= 0 ? static_cast<std::uint64_t>(seed) : 0);
    }
    const std::vector<std::size_t>* ids = &split.test;
    if (split_name == "val") ids = &split.val;
    else if (split_name == "train") ids = &split.train;
    else if (split_name != "test") throw ValueError("eval: unknown split '" + split_name + "'");

    EvalReport report;
    if (!baseline.empty()) {
        if (baseline != "bicubic") throw ValueError("eval: unknown baseline '" + baseline + "'");
        if (scale < 2 || scale > 4) throw ValueError("eval: --baseline needs --scale {2|3|4}");
        report = evaluate_bicubic(index, *ids, scale);
    } else {
        if (checkpoint.empty()) throw ValueError("eval: need --checkpoint or --baseline bicubic");
        auto ck = load_checkpoint(checkpoint);
        report = evaluate_model(ck.model, index, *ids, ck.model.cfg.scale);
    }

    if (!out_csv.empty()) {
        std::ofstream os(out_csv);
        if (!os.good()) throw IoError("eval: cannot write " + out_csv);
        write_report_csv(report, os);
    }
    if (pretty)
        print_report_pretty(report, std::cout);
    else
        write_report_csv(report, std::cout);
    return kExitOk;
}

int cmd_sr(const std::string& checkpoint, const std::vector<std::string>& inputs, const std::string& out_dir) {
    if (inputs.empty()) throw ValueError("sr: no input images");
    auto ck = load_checkpoint(checkpoint);
    fs::create_directories(out_dir.empty() ? "." : out_dir);
    for (const auto& in_path : inputs) {
        ImageF32 lr = to_f32(load_image(in_path));
        ImageF32 sr = super_resolve(ck.model, lr);
        const auto stem = fs::path(in_path).stem().string();
        const auto out = fs::path(out_dir.empty() ? "." : out_dir) /
                         (stem + "_x" + std::to_string(ck.model.cfg.scale) + ".png");
        save_image(out.string(), to_u8(sr));
        std::cout << in_path << " -> " << out.string() << " (" << sr.width << "x" << sr.height << ")\n";
    }
    return kExitOk;
}

int cmd_degrade(const std::string& in_dir, const std::string& out_dir, int scale) {
    if (scale < 2 || scale > 4) throw ValueError("degrade: --scale must be one of {2|3|4}");
    if (!fs::exists(in_dir)) throw IoError("degrade: input path not found: " + in_dir);
    fs::create_directories(fs::path(out_dir) / "LR");
    fs::create_directories(fs::path(out_dir) / "HR");

    std::vector<fs::path> files;
    if (fs::is_directory(in_dir)) {
        for (const auto& e : fs::recursive_directory_iterator(in_dir)) {
            if (!e.is_regular_file()) continue;
            auto ext = e.path().extension().string();
            std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
            if (ext == ".png" || ext == ".tif" || ext == ".tiff") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
    } else {
        files.push_back(in_dir);
    }
    if (files.empty()) throw IoError("degrade: no images under " + in_dir);

    int written = 0;
    for (const auto& f : files) {
        try {
            ImageF32 hr = to_f32(load_image(f.string()));
            SamplePair pair = degrade(hr, scale);
            const auto rel = fs::is_directory(in_dir) ? fs::relative(f, in_dir) : f.filename();
            auto lr_path = fs::path(out_dir) / "LR" / rel;
            auto hr_path = fs::path(out_dir) / "HR" / rel;
            lr_path.replace_extension(".png");
            hr_path.replace_extension(".png");
            fs::create_directories(lr_path.parent_path());
            fs::create_directories(hr_path.parent_path());
            save_image(lr_path.string(), to_u8(pair.lr));
            save_image(hr_path.string(), to_u8(pair.hr));
            ++written;
        } catch (const std::exception& e) {
            std::cerr << "degrade: skipping " << f.string() << ": " << e.what() << "\n";
        }
    }
    if (written == 0) throw IoError("degrade: nothing written");
    std::cout << "degraded " << written << " image(s) at x" << scale << " into " << out_dir << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CSA-attention super-resolution toolkit"};
    app.require_subcommand(1);

    std::string config_path, data_root, out_dir, checkpoint, resume, baseline, split_name = "test", split_file,
                                                                               out_csv;
    std::vector<std::string> overrides, inputs;
    int scale = 0;
    long seed = -1;
    bool pretty = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "flat key = value config file");
        sub->add_option("--set", overrides, "override, e.g. --set model.scale=3")->take_all();
        sub->add_option("--seed", seed, "seed for all randomness");
    };

    auto* train = app.add_subcommand("train", "train a model");
    add_common(train);
    train->add_option("--data", data_root, "dataset root (class subdirectories)");
    train->add_option("--out", out_dir, "checkpoint/log directory");
    train->add_option("--checkpoint", resume, "resume from this checkpoint");
    train->add_option("--scale", scale, "upscaling factor")->check(CLI::IsMember({2, 3, 4}));

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or the bicubic baseline");
    add_common(eval);
    eval->add_option("--data", data_root, "dataset root")->required();
    eval->add_option("--checkpoint", checkpoint, "model checkpoint");
    eval->add_option("--baseline", baseline, "score a baseline instead of a model (bicubic)");
    eval->add_option("--split", split_name, "test|val|train (default test)");
    eval->add_option("--split-file", split_file, "reuse a saved split.txt");
    eval->add_option("--out", out_csv, "write the report CSV here");
    eval->add_option("--scale", scale, "upscaling factor (baseline mode)")->check(CLI::IsMember({2, 3, 4}));
    eval->add_flag("--pretty", pretty, "human-readable table instead of CSV");

    auto* sr = app.add_subcommand("sr", "super-resolve image(s)");
    sr->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    sr->add_option("--in", inputs, "input image(s)")->required()->take_all();
    sr->add_option("--out", out_dir, "output directory");

    auto* degrade_cmd = app.add_subcommand("degrade", "bicubic-degrade HR images into LR/HR pairs");
    degrade_cmd->add_option("--in", data_root, "HR image or directory")->required();
    degrade_cmd->add_option("--out", out_dir, "output directory")->required();
    degrade_cmd->add_option("--scale", scale, "downscaling factor")->required()->check(CLI::IsMember({2, 3, 4}));

    auto* gradcheck = app.add_subcommand("gradcheck", "run the gradient-check suite");
    auto* selftest = app.add_subcommand("selftest", "run the cross-module assertion battery");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, overrides, data_root, out_dir, resume, scale, seed);
        if (eval->parsed())
            return cmd_eval(checkpoint, data_root, baseline, split_name, split_file, out_csv, scale, seed, pretty);
        if (sr->parsed()) return cmd_sr(checkpoint, inputs, out_dir);
        if (degrade_cmd->parsed()) return cmd_degrade(data_root, out_dir, scale);
        if (gradcheck->parsed()) {
            const int failures = run_gradcheck_suite(std::cout);
            if (failures) std::cout << failures << " gradient check(s) failed\n";
            return failures == 0 ? kExitOk : kExitNumeric;
        }
        if (selftest->parsed()) {
            return run_selftest(std::cout) == 0 ? kExitOk : kExitNumeric;
        }
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const ValueError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
