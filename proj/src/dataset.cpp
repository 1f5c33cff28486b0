#include "flipshield/dataset.hpp"

#include <algorithm>
#include <utility>

#include <json.hpp>

#include "flipshield/errors.hpp"
#include "flipshield/hash.hpp"
#include "flipshield/rng.hpp"

namespace flipshield {

using nlohmann::json;

namespace {
// Bump when the drawing procedure or draw order changes: the hash of a
// dataset is the hash of (descriptor, generator version).
constexpr const char* kGeneratorVersion = "dataset-v1";
} // namespace

std::string DatasetConfig::to_json(int indent) const {
    json j;
    j["seed"] = seed;
    j["n_images"] = n_images;
    j["image_h"] = image_h;
    j["image_w"] = image_w;
    j["channels"] = channels;
    j["min_objects"] = min_objects;
    j["max_objects"] = max_objects;
    j["num_classes"] = num_classes;
    j["profiling_fraction"] = profiling_fraction;
    return j.dump(indent);
}

DatasetConfig DatasetConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& ex) {
        throw FormatError(std::string("unparseable dataset config: ") + ex.what());
    }
    DatasetConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        c.n_images = j.value("n_images", c.n_images);
        c.image_h = j.value("image_h", c.image_h);
        c.image_w = j.value("image_w", c.image_w);
        c.channels = j.value("channels", c.channels);
        c.min_objects = j.value("min_objects", c.min_objects);
        c.max_objects = j.value("max_objects", c.max_objects);
        c.num_classes = j.value("num_classes", c.num_classes);
        c.profiling_fraction = j.value("profiling_fraction", c.profiling_fraction);
    } catch (const json::exception& ex) {
        throw FormatError(std::string("malformed dataset config: ") + ex.what());
    }
    return c;
}

std::vector<Tensor> SyntheticDataset::profiling_images() const {
    std::vector<Tensor> out;
    out.reserve(profiling_indices.size());
    for (std::size_t i : profiling_indices) out.push_back(images[i]);
    return out;
}

std::uint64_t SyntheticDataset::content_hash() const {
    return fnv1a64(config.to_json(-1), fnv1a64(std::string(kGeneratorVersion)));
}

std::string SyntheticDataset::annotations_json(int indent) const {
    json arr = json::array();
    for (std::size_t i = 0; i < annotations.size(); ++i) {
        json row;
        row["image_id"] = i;
        json objs = json::array();
        for (const auto& o : annotations[i]) {
            json jo;
            jo["x_min"] = o.x_min;
            jo["y_min"] = o.y_min;
            jo["x_max"] = o.x_max;
            jo["y_max"] = o.y_max;
            jo["class_id"] = o.class_id;
            objs.push_back(std::move(jo));
        }
        row["objects"] = std::move(objs);
        arr.push_back(std::move(row));
    }
    return arr.dump(indent);
}

namespace {

/// Draw order per object is part of the determinism contract:
/// class, width, height, x0, y0, then one color per channel.
void draw_object(Tensor& image, GroundTruth& gt, Rng& rng, const DatasetConfig& c) {
    const std::size_t h = c.image_h, w = c.image_w;
    GtObject obj;
    obj.class_id = static_cast<int>(rng.uniform_index(c.num_classes));

    const auto side = [&rng](std::size_t extent) {
        const std::size_t lo = std::max<std::size_t>(3, extent / 6);
        const std::size_t hi = std::max<std::size_t>(lo + 1, extent / 3);
        return lo + rng.uniform_index(hi - lo + 1);
    };
    const std::size_t pw = side(w);
    const std::size_t ph = side(h);
    const std::size_t x0 = rng.uniform_index(w - pw + 1);
    const std::size_t y0 = rng.uniform_index(h - ph + 1);

    std::vector<float> color(c.channels);
    for (float& ch : color) ch = 0.55f + 0.4f * rng.uniform01();

    const bool rectangle = obj.class_id % 2 == 0;
    const float cx = static_cast<float>(x0) + static_cast<float>(pw - 1) * 0.5f;
    const float cy = static_cast<float>(y0) + static_cast<float>(ph - 1) * 0.5f;
    const float rx = static_cast<float>(pw) * 0.5f;
    const float ry = static_cast<float>(ph) * 0.5f;
    for (std::size_t ch = 0; ch < c.channels; ++ch) {
        for (std::size_t y = y0; y < y0 + ph; ++y) {
            for (std::size_t x = x0; x < x0 + pw; ++x) {
                if (!rectangle) {
                    const float dx = (static_cast<float>(x) - cx) / rx;
                    const float dy = (static_cast<float>(y) - cy) / ry;
                    if (dx * dx + dy * dy > 1.0f) continue;
                }
                image[(ch * h + y) * w + x] = color[ch];
            }
        }
    }

    obj.x_min = static_cast<float>(x0) / static_cast<float>(w);
    obj.y_min = static_cast<float>(y0) / static_cast<float>(h);
    obj.x_max = static_cast<float>(x0 + pw) / static_cast<float>(w);
    obj.y_max = static_cast<float>(y0 + ph) / static_cast<float>(h);
    gt.push_back(obj);
}

} // namespace

SyntheticDataset generate_dataset(const DatasetConfig& c) {
    if (c.n_images < 2) throw ConfigError("dataset needs at least 2 images (both splits)");
    if (c.image_h < 8 || c.image_w < 8) throw ConfigError("degenerate image size");
    if (c.channels < 1) throw ConfigError("dataset needs at least 1 channel");
    if (c.min_objects < 1 || c.min_objects > c.max_objects) {
        throw ConfigError("objects-per-image range must satisfy 1 <= min <= max");
    }
    if (c.num_classes < 2) throw ConfigError("dataset needs at least 2 object classes");
    if (!(c.profiling_fraction >= 0.0f && c.profiling_fraction < 1.0f)) {
        throw ConfigError("profiling_fraction must be in [0, 1)");
    }

    SyntheticDataset ds;
    ds.config = c;
    Rng root(c.seed);
    for (std::size_t i = 0; i < c.n_images; ++i) {
        Rng rng = root.fork(i);
        Tensor image({c.channels, c.image_h, c.image_w});
        for (float& v : image.values()) v = 0.05f + 0.25f * rng.uniform01();
        GroundTruth gt;
        const std::size_t k =
            c.min_objects + rng.uniform_index(c.max_objects - c.min_objects + 1);
        for (std::size_t o = 0; o < k; ++o) draw_object(image, gt, rng, c);
        ds.images.push_back(std::move(image));
        ds.annotations.push_back(std::move(gt));
    }

    const double want = static_cast<double>(c.profiling_fraction) *
                        static_cast<double>(c.n_images);
    std::size_t n_prof = static_cast<std::size_t>(want + 0.5);
    n_prof = std::clamp<std::size_t>(n_prof, 1, c.n_images - 1);
    for (std::size_t i = 0; i < n_prof; ++i) ds.profiling_indices.push_back(i);
    for (std::size_t i = n_prof; i < c.n_images; ++i) ds.eval_indices.push_back(i);
    return ds;
}

} // namespace flipshield
