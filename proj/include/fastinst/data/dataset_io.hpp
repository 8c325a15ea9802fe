#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fastinst/core/rng.hpp"
#include "fastinst/data/mask.hpp"
#include "fastinst/data/scene.hpp"

namespace fastinst {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Netpbm

/// Writes a binary PPM (P6) from a (3,H,W) image in [0,1].
inline void write_ppm(const fs::path& path, const Tensor<float>& image) {
    const std::size_t H = image.dim(1), W = image.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P6\n" << W << ' ' << H << "\n255\n";
    std::vector<char> buf(H * W * 3);
    for (std::size_t i = 0; i < H * W; ++i)
        for (std::size_t c = 0; c < 3; ++c)
            buf[i * 3 + c] = static_cast<char>(std::lround(std::clamp(image[c * H * W + i], 0.0f, 1.0f) * 255.0f));
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

/// Writes a binary PGM (P5) from row-major values in [0,1].
inline void write_pgm(const fs::path& path, std::size_t height, std::size_t width, const std::vector<float>& values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P5\n" << width << ' ' << height << "\n255\n";
    std::vector<char> buf(height * width);
    for (std::size_t i = 0; i < buf.size(); ++i)
        buf[i] = static_cast<char>(std::lround(std::clamp(values[i], 0.0f, 1.0f) * 255.0f));
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline Tensor<float> read_ppm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string magic;
    std::size_t W = 0, H = 0, maxval = 0;
    in >> magic >> W >> H >> maxval;
    if (magic != "P6" || maxval != 255 || W == 0 || H == 0) throw std::runtime_error(path.string() + ": not an 8-bit P6 image");
    in.get();
    std::vector<unsigned char> buf(H * W * 3);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw std::runtime_error(path.string() + ": truncated pixel data");
    Rgb8 rgb{H, W, std::vector<std::uint8_t>(buf.begin(), buf.end())};
    return rgb.to_tensor();
}

// ---------------------------------------------------------------------------
// Dataset manifest

inline json spec_to_json(const DatasetSpec& s) {
    return {{"num_classes", s.num_classes},       {"height", s.height},
            {"width", s.width},                   {"min_instances", s.min_instances},
            {"max_instances", s.max_instances},   {"min_instance_area", s.min_instance_area},
            {"num_images", s.num_images},         {"seed", s.seed}};
}

inline DatasetSpec spec_from_json(const json& j) {
    DatasetSpec s;
    s.num_classes = j.at("num_classes").get<int>();
    s.height = j.at("height").get<std::size_t>();
    s.width = j.at("width").get<std::size_t>();
    s.min_instances = j.at("min_instances").get<int>();
    s.max_instances = j.at("max_instances").get<int>();
    s.min_instance_area = j.at("min_instance_area").get<std::size_t>();
    s.num_images = j.at("num_images").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

inline json rle_to_json(const BinaryMask& m) { return {{"counts", rle_encode(m)}, {"size", {m.height, m.width}}}; }

inline BinaryMask rle_from_json(const json& j) {
    return rle_decode(j.at("counts").get<std::vector<std::uint32_t>>(), j.at("size").at(0).get<std::size_t>(),
                      j.at("size").at(1).get<std::size_t>());
}

inline std::string image_file_name(std::int64_t id) {
    std::ostringstream os;
    os << "images/" << std::setw(6) << std::setfill('0') << id << ".ppm";
    return os.str();
}

/// COCO-shaped manifest: images[], categories[], annotations[]{image_id, category_id, rle}.
inline json build_manifest(const DatasetSpec& spec, const std::vector<SceneSample>& samples, const json& extra = json::object()) {
    json manifest;
    manifest["prng"] = std::string(kPrngName);
    manifest["spec"] = spec_to_json(spec);
    manifest["images"] = json::array();
    manifest["categories"] = json::array();
    manifest["annotations"] = json::array();
    for (int k = 1; k <= spec.num_classes; ++k) manifest["categories"].push_back({{"id", k}, {"name", kShapeNames[k - 1]}});
    std::int64_t ann_id = 1;
    for (const auto& s : samples) {
        manifest["images"].push_back(
            {{"id", s.image_id}, {"file_name", image_file_name(s.image_id)}, {"height", s.height()}, {"width", s.width()}});
        for (const auto& inst : s.instances)
            manifest["annotations"].push_back({{"id", ann_id++},
                                               {"image_id", s.image_id},
                                               {"category_id", inst.class_id},
                                               {"area", inst.mask.area()},
                                               {"rle", rle_to_json(inst.mask)}});
    }
    for (auto& [k, v] : extra.items()) manifest[k] = v;
    return manifest;
}

inline void write_dataset(const fs::path& dir, const DatasetSpec& spec, const std::vector<SceneSample>& samples,
                          const json& extra = json::object()) {
    fs::create_directories(dir / "images");
    for (const auto& s : samples) write_ppm(dir / image_file_name(s.image_id), s.image);
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
    out << build_manifest(spec, samples, extra).dump(1) << '\n';
}

struct LoadedDataset {
    DatasetSpec spec;
    std::vector<SceneSample> samples;
};

inline LoadedDataset read_dataset(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
    const json manifest = json::parse(in);
    LoadedDataset ds;
    ds.spec = spec_from_json(manifest.at("spec"));
    std::map<std::int64_t, std::size_t> index_of;
    for (const auto& img : manifest.at("images")) {
        SceneSample s;
        s.image_id = img.at("id").get<std::int64_t>();
        s.image = read_ppm(dir / img.at("file_name").get<std::string>());
        index_of[s.image_id] = ds.samples.size();
        ds.samples.push_back(std::move(s));
    }
    for (const auto& ann : manifest.at("annotations")) {
        auto it = index_of.find(ann.at("image_id").get<std::int64_t>());
        if (it == index_of.end()) throw std::runtime_error("annotation refers to an unknown image");
        ds.samples[it->second].instances.push_back({ann.at("category_id").get<int>(), rle_from_json(ann.at("rle"))});
    }
    return ds;
}

}  // namespace fastinst
