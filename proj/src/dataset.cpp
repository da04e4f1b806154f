#include "csasr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

namespace fs = std::filesystem;

namespace csasr {

namespace {

bool has_image_extension(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".tif" || ext == ".tiff";
}

}  // namespace

DatasetIndex scan_dataset(const std::string& root) {
    if (!fs::is_directory(root)) throw IoError("dataset: root is not a directory: " + root);

    DatasetIndex index;
    index.root = root;

    std::vector<std::string> classes;
    for (const auto& e : fs::directory_iterator(root)) {
        if (e.is_directory()) classes.push_back(e.path().filename().string());
    }
    std::sort(classes.begin(), classes.end());

    for (const auto& cls : classes) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(fs::path(root) / cls)) {
            if (!e.is_regular_file()) continue;
            if (!has_image_extension(e.path())) continue;
            std::ifstream probe(e.path(), std::ios::binary);
            if (!probe.good()) {
                std::cerr << "dataset: skipping unreadable file " << e.path().string() << "\n";
                continue;
            }
            files.push_back(e.path().filename().string());
        }
        std::sort(files.begin(), files.end());
        if (files.empty()) continue;
        index.class_names.push_back(cls);
        for (const auto& f : files) {
            index.entries.push_back({cls, (fs::path(root) / cls / f).string(), f});
        }
    }

    if (index.entries.empty()) throw IoError("dataset: no usable images under " + root);
    if (index.class_names.size() != 21 || index.entries.size() != 2100) {
        std::cerr << "dataset: partial corpus, " << index.class_names.size() << " classes / " << index.entries.size()
                  << " images (full UCMerced layout is 21 x 100)\n";
    }
    return index;
}

SplitSpec make_splits(const DatasetIndex& index, std::uint64_t seed) {
    SplitSpec split;
    split.seed = seed;
    Rng rng(seed);

    std::map<std::string, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < index.entries.size(); ++i) by_class[index.entries[i].class_name].push_back(i);

    for (const auto& cls : index.class_names) {
        auto ids = by_class.at(cls);
        if (ids.size() < 2) {
            throw ValueError("dataset: class '" + cls + "' has " + std::to_string(ids.size()) +
                             " images; at least 2 are needed to split");
        }
        rng.shuffle(ids);
        const std::size_t n_test = ids.size() / 2;
        const std::size_t share = ids.size() - n_test;
        std::size_t n_val = static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(share)));
        if (share >= 5 && n_val == 0) n_val = 1;
        if (n_val >= share) n_val = share - 1;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (k < n_test)
                split.test.push_back(ids[k]);
            else if (k < n_test + n_val)
                split.val.push_back(ids[k]);
            else
                split.train.push_back(ids[k]);
        }
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

void save_split(const std::string& path, const DatasetIndex& index, const SplitSpec& split) {
    std::ofstream out(path);
    if (!out.good()) throw IoError("split: cannot write " + path);
    auto write = [&](const char* name, const std::vector<std::size_t>& ids) {
        for (std::size_t i : ids) {
            out << name << '\t' << index.entries[i].class_name << '/' << index.entries[i].filename << '\n';
        }
    };
    write("train", split.train);
    write("val", split.val);
    write("test", split.test);
}

SplitSpec load_split(const std::string& path, const DatasetIndex& index) {
    std::ifstream in(path);
    if (!in.good()) throw IoError("split: cannot read " + path);

    std::map<std::string, std::size_t> lookup;
    for (std::size_t i = 0; i < index.entries.size(); ++i) {
        lookup[index.entries[i].class_name + "/" + index.entries[i].filename] = i;
    }

    SplitSpec split;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw IoError("split: malformed line " + std::to_string(lineno) + " in " + path);
        const std::string kind = line.substr(0, tab);
        const std::string key = line.substr(tab + 1);
        auto it = lookup.find(key);
        if (it == lookup.end()) throw IoError("split: '" + key + "' is not in the dataset index");
        if (kind == "train")
            split.train.push_back(it->second);
        else if (kind == "val")
            split.val.push_back(it->second);
        else if (kind == "test")
            split.test.push_back(it->second);
        else
            throw IoError("split: unknown split '" + kind + "' on line " + std::to_string(lineno));
    }
    return split;
}

namespace {

ImageF32 apply_augment(const ImageF32& img, std::uint64_t code) {
    // 3 bits: horizontal flip, vertical flip, transpose.
    ImageF32 out = img;
    const bool hflip = code & 1, vflip = code & 2, transpose = code & 4;
    if (hflip || vflip) {
        for (int c = 0; c < img.channels; ++c)
            for (int y = 0; y < img.height; ++y)
                for (int x = 0; x < img.width; ++x)
                    out.at(c, y, x) = img.at(c, vflip ? img.height - 1 - y : y, hflip ? img.width - 1 - x : x);
    }
    if (transpose) {
        ImageF32 t;
        t.channels = out.channels;
        t.height = out.width;
        t.width = out.height;
        t.samples.resize(out.samples.size());
        for (int c = 0; c < out.channels; ++c)
            for (int y = 0; y < out.height; ++y)
                for (int x = 0; x < out.width; ++x) t.at(c, x, y) = out.at(c, y, x);
        return t;
    }
    return out;
}

}  // namespace

std::vector<SamplePair> next_batch(const DatasetIndex& index, const std::vector<std::size_t>& split, int scale,
                                   int patch_hr, int batch, Rng& rng, bool augment) {
    if (split.empty()) throw ValueError("next_batch: empty split");
    if (patch_hr % scale != 0) {
        throw ValueError("next_batch: patch_hr=" + std::to_string(patch_hr) + " must be divisible by scale=" +
                         std::to_string(scale));
    }
    std::vector<SamplePair> out;
    out.reserve(batch);
    for (int b = 0; b < batch; ++b) {
        const std::size_t id = split[rng.uniform_int(split.size())];
        const auto& entry = index.entries[id];
        ImageF32 img = to_f32(load_image(entry.path));
        if (img.height < patch_hr || img.width < patch_hr) {
            throw ValueError("next_batch: patch " + std::to_string(patch_hr) + " larger than image " + entry.path);
        }
        const int oy = static_cast<int>(rng.uniform_int(img.height - patch_hr + 1));
        const int ox = static_cast<int>(rng.uniform_int(img.width - patch_hr + 1));
        ImageF32 patch = crop(img, oy, ox, patch_hr, patch_hr);
        if (augment) patch = apply_augment(patch, rng.uniform_int(8));
        SamplePair pair = degrade(patch, scale);
        pair.image_path = entry.path;
        pair.crop_y = oy;
        pair.crop_x = ox;
        out.push_back(std::move(pair));
    }
    return out;
}

}  // namespace csasr
