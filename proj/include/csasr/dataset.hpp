#pragma once

#include <string>
#include <vector>

#include "csasr/image.hpp"
#include "csasr/rng.hpp"

namespace csasr {

/// Directory layout: root/<class_name>/<image>.{png,tif,tiff}. Classes
/// and files are ordered lexicographically so indexing is deterministic.
struct DatasetIndex {
    std::string root;
    struct Entry {
        std::string class_name;
        std::string path;  // full path
        std::string filename;
    };
    std::vector<Entry> entries;
    std::vector<std::string> class_names;
};

struct SplitSpec {
    std::uint64_t seed = 0;
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

DatasetIndex scan_dataset(const std::string& root);

/// Per class: a seeded shuffle sends 50% (floor) to test; of the
/// remaining train share, 20% (round-to-nearest, at least 1 when the
/// share is >= 5) becomes validation.
SplitSpec make_splits(const DatasetIndex& index, std::uint64_t seed);

void save_split(const std::string& path, const DatasetIndex& index, const SplitSpec& split);
SplitSpec load_split(const std::string& path, const DatasetIndex& index);

/// Samples `batch` images uniformly (with replacement) from the split,
/// takes one random patch_hr x patch_hr HR crop from each and degrades
/// it at the given scale. No augmentation unless `augment` is set
/// (then each crop is randomly flipped/rotated).
std::vector<SamplePair> next_batch(const DatasetIndex& index, const std::vector<std::size_t>& split, int scale,
                                   int patch_hr, int batch, Rng& rng, bool augment = false);

}  // namespace csasr
