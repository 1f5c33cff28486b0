#ifndef FLIPSHIELD_DATASET_HPP
#define FLIPSHIELD_DATASET_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "flipshield/metrics.hpp"
#include "flipshield/tensor.hpp"

namespace flipshield {

/// Everything needed to regenerate a dataset bit-identically.
struct DatasetConfig {
    std::uint64_t seed = 1;
    std::size_t n_images = 125;
    std::size_t image_h = 32, image_w = 32, channels = 3;
    std::size_t min_objects = 1, max_objects = 3;
    std::size_t num_classes = 2;
    /// Leading fraction of images reserved for bounds profiling; the rest
    /// form the evaluation split. The two index sets are disjoint.
    float profiling_fraction = 0.2f;

    std::string to_json(int indent = 2) const;
    static DatasetConfig from_json(const std::string& text);
};

/// Generated images ([0,1] values, C x H x W) with exact box annotations.
struct SyntheticDataset {
    DatasetConfig config;
    std::vector<Tensor> images;
    std::vector<GroundTruth> annotations;
    std::vector<std::size_t> profiling_indices;
    std::vector<std::size_t> eval_indices;

    std::vector<Tensor> profiling_images() const;
    /// Hash of the descriptor (regeneration is bit-exact, so the descriptor
    /// addresses the content).
    std::uint64_t content_hash() const;

    /// Annotation dump: [{image_id, objects: [{x_min..y_max, class_id}]}].
    std::string annotations_json(int indent = 2) const;
};

/// Deterministic generator: textured background, 1..k axis-aligned shapes
/// (class 0 = rectangle, class 1 = disc, higher classes alternate) with
/// tight normalized boxes inside [0,1]^2.
SyntheticDataset generate_dataset(const DatasetConfig& config);

} // namespace flipshield

#endif // FLIPSHIELD_DATASET_HPP
