#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtprompt/mtt.hpp"
#include "mtprompt/parallel.hpp"
#include "mtprompt/rng.hpp"
#include "mtprompt/tensor.hpp"

// Synthetic multi-task scenes: a tilted background plane plus axis-aligned
// rectangles and ellipses floating in front of it, each on its own slightly
// tilted plane. Every ground-truth map is derived from the one composited
// depth/label field, so the task annotations are mutually consistent:
//   semseg  - nearest surface's class
//   depth   - nearest surface's depth (meters, inside [1, 5])
//   normal  - unit normals from central differences of the depth map
//   edge    - pixels with a 4-neighbor of a different semseg label
//   saliency- union of object masks (optional in the on-disk sample)

namespace mtp {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Sample {
    Tensor<float> image;    // H x W x 3 in [0,1]
    Tensor<int32_t> semseg; // H x W class ids, 0 = background
    Tensor<float> depth;    // H x W meters
    Tensor<float> normal;   // H x W x 3, unit length
    Tensor<uint8_t> edge;   // H x W binary
    Tensor<uint8_t> saliency; // H x W binary; may be undefined when loaded from a 5-entry file
};

namespace detail {

struct Surface {
    bool ellipse = false;
    int cls = 0;
    double cx = 0, cy = 0, hx = 1, hy = 1; // center, half extents (pixels)
    double z0 = 0, sx = 0, sy = 0;         // plane through (cx, cy)

    bool covers(int x, int y) const {
        const double dx = (x - cx) / hx, dy = (y - cy) / hy;
        if (ellipse) return dx * dx + dy * dy <= 1.0;
        return std::abs(x - cx) <= hx && std::abs(y - cy) <= hy;
    }
    double depth_at(int x, int y) const { return z0 + sx * (x - cx) + sy * (y - cy); }
};

// fixed class palette shared by every sample so segmentation is learnable
inline void class_color(int cls, float rgb[3]) {
    const double h = std::fmod(0.61803398875 * cls, 1.0) * 6.0;
    const int i = static_cast<int>(h);
    const double f = h - i;
    const double v = 0.85, p = 0.25, q = v - (v - p) * f, t = p + (v - p) * f;
    double r, g, b;
    switch (i % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
    rgb[0] = static_cast<float>(r);
    rgb[1] = static_cast<float>(g);
    rgb[2] = static_cast<float>(b);
}

} // namespace detail

// Edge rule shared by the generator and everything that re-derives it.
inline Tensor<uint8_t> edges_from_labels(const Tensor<int32_t>& semseg) {
    const int h = semseg.dim(0), w = semseg.dim(1);
    Tensor<uint8_t> edge = Tensor<uint8_t>::zeros({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int32_t c = semseg.at(y, x);
            bool e = false;
            if (y > 0 && semseg.at(y - 1, x) != c) e = true;
            if (!e && y + 1 < h && semseg.at(y + 1, x) != c) e = true;
            if (!e && x > 0 && semseg.at(y, x - 1) != c) e = true;
            if (!e && x + 1 < w && semseg.at(y, x + 1) != c) e = true;
            edge.at(y * w + x) = e ? 1 : 0;
        }
    return edge;
}

// Unit normals from central differences of the depth field (clamped at the
// image border). Orthographic convention: n ~ (-dz/dx, -dz/dy, 1).
inline Tensor<float> normals_from_depth(const Tensor<float>& depth) {
    const int h = depth.dim(0), w = depth.dim(1);
    Tensor<float> normal = Tensor<float>::zeros({h, w, 3});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int xm = x > 0 ? x - 1 : 0, xp = x + 1 < w ? x + 1 : w - 1;
            const int ym = y > 0 ? y - 1 : 0, yp = y + 1 < h ? y + 1 : h - 1;
            const float dzdx = (depth.at(y, xp) - depth.at(y, xm)) / static_cast<float>(xp - xm);
            const float dzdy = (depth.at(yp, x) - depth.at(ym, x)) / static_cast<float>(yp - ym);
            float n[3] = {-dzdx, -dzdy, 1.0f};
            const float len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
            normal.at(y, x, 0) = n[0] / len;
            normal.at(y, x, 1) = n[1] / len;
            normal.at(y, x, 2) = n[2] / len;
        }
    return normal;
}

inline Sample gen_scene(uint64_t seed, int h, int w, int classes, int n_objects) {
    if (classes < 2) throw ConfigError("gen_scene: need at least 2 classes (background + 1)");
    if (n_objects < 0) throw ConfigError("gen_scene: negative object count");

    Rng rng(seed);
    const double light[3] = {0.301511, -0.502519, 0.804030}; // fixed light direction

    for (int attempt = 0; attempt <= 10; ++attempt) {
        const int objs = std::max(0, n_objects - attempt);

        detail::Surface bg;
        bg.cls = 0;
        bg.cx = w / 2.0;
        bg.cy = h / 2.0;
        bg.hx = w;
        bg.hy = h;
        bg.z0 = rng.uniform(3.2, 4.2);
        bg.sx = rng.uniform(-0.012, 0.012);
        bg.sy = rng.uniform(-0.012, 0.012);

        std::vector<detail::Surface> surfaces;
        for (int i = 0; i < objs; ++i) {
            detail::Surface s;
            s.ellipse = rng.bernoulli(0.5);
            s.cls = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(classes - 1)));
            s.cx = rng.uniform(0.15 * w, 0.85 * w);
            s.cy = rng.uniform(0.15 * h, 0.85 * h);
            s.hx = rng.uniform(0.06 * w, 0.22 * w);
            s.hy = rng.uniform(0.06 * h, 0.22 * h);
            s.z0 = bg.depth_at(static_cast<int>(s.cx), static_cast<int>(s.cy)) - rng.uniform(0.3, 1.0);
            s.sx = rng.uniform(-0.01, 0.01);
            s.sy = rng.uniform(-0.01, 0.01);
            surfaces.push_back(s);
        }

        std::vector<std::array<float, 3>> colors;
        for (const auto& s : surfaces) {
            float base[3];
            detail::class_color(s.cls, base);
            colors.push_back({static_cast<float>(base[0] + rng.uniform(-0.08, 0.08)),
                              static_cast<float>(base[1] + rng.uniform(-0.08, 0.08)),
                              static_cast<float>(base[2] + rng.uniform(-0.08, 0.08))});
        }
        const float bg_col[3] = {static_cast<float>(0.45 + rng.uniform(-0.05, 0.05)),
                                 static_cast<float>(0.45 + rng.uniform(-0.05, 0.05)),
                                 static_cast<float>(0.45 + rng.uniform(-0.05, 0.05))};

        Sample out;
        out.semseg = Tensor<int32_t>::zeros({h, w});
        out.depth = Tensor<float>::zeros({h, w});
        out.saliency = Tensor<uint8_t>::zeros({h, w});
        std::vector<int> owner(static_cast<size_t>(h) * w, -1); // surface index, -1 = background

        int background_pixels = 0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double z = bg.depth_at(x, y);
                int who = -1;
                for (size_t i = 0; i < surfaces.size(); ++i) {
                    if (!surfaces[i].covers(x, y)) continue;
                    const double zd = surfaces[i].depth_at(x, y);
                    if (zd < z) {
                        z = zd;
                        who = static_cast<int>(i);
                    }
                }
                owner[static_cast<size_t>(y) * w + x] = who;
                out.depth.at(y, x) = static_cast<float>(z);
                out.semseg.at(y * w + x) = who < 0 ? 0 : surfaces[static_cast<size_t>(who)].cls;
                out.saliency.at(y * w + x) = who < 0 ? 0 : 1;
                if (who < 0) ++background_pixels;
            }
        if (background_pixels == 0) {
            if (attempt == 10) throw std::runtime_error("gen_scene: canvas overcrowded after 10 retries");
            continue;
        }

        out.normal = normals_from_depth(out.depth);
        out.edge = edges_from_labels(out.semseg);

        // shading makes depth and normals recoverable from the image
        out.image = Tensor<float>::zeros({h, w, 3});
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int who = owner[static_cast<size_t>(y) * w + x];
                const float* col = who < 0 ? bg_col : colors[static_cast<size_t>(who)].data();
                const float ndotl = out.normal.at(y, x, 0) * static_cast<float>(light[0]) +
                                    out.normal.at(y, x, 1) * static_cast<float>(light[1]) +
                                    out.normal.at(y, x, 2) * static_cast<float>(light[2]);
                const float shade = 0.55f + 0.45f * std::max(0.0f, ndotl);
                const float atten = 1.0f - 0.12f * (out.depth.at(y, x) - 1.0f);
                for (int c = 0; c < 3; ++c) {
                    float v = col[c] * shade * atten + static_cast<float>(rng.uniform(-0.03, 0.03));
                    out.image.at(y, x, c) = std::min(1.0f, std::max(0.0f, v));
                }
            }
        return out;
    }
    throw std::runtime_error("gen_scene: unreachable");
}

// ---------------------------------------------------------------------------
// dataset on disk: root/{train,val}/sample_XXXXX.mtt + root/manifest.json

struct DatasetManifest {
    int format_version = 1;
    int classes = 5;
    uint64_t seed = 0;
    int height = 64, width = 64;
    bool with_saliency = false;
    std::vector<std::pair<std::string, int>> splits; // (name, sample count)

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format_version"] = format_version;
        j["classes"] = classes;
        j["seed"] = seed;
        j["height"] = height;
        j["width"] = width;
        j["with_saliency"] = with_saliency;
        for (const auto& [name, count] : splits) j["splits"][name] = count;
        return j;
    }

    static DatasetManifest from_json(const nlohmann::json& j) {
        DatasetManifest m;
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version != 1)
            throw IoError("manifest: unsupported format_version " + std::to_string(m.format_version));
        m.classes = j.at("classes").get<int>();
        m.seed = j.at("seed").get<uint64_t>();
        m.height = j.at("height").get<int>();
        m.width = j.at("width").get<int>();
        m.with_saliency = j.value("with_saliency", false);
        for (auto it = j.at("splits").begin(); it != j.at("splits").end(); ++it)
            m.splits.emplace_back(it.key(), it.value().get<int>());
        return m;
    }
};

inline std::string sample_filename(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%05d.mtt", index);
    return buf;
}

inline void write_sample(const std::string& path, const Sample& s, bool with_saliency) {
    MttFile f;
    f.add("image", s.image);
    f.add("semseg", s.semseg);
    f.add("depth", s.depth);
    f.add("normal", s.normal);
    f.add("edge", s.edge);
    if (with_saliency) f.add("saliency", s.saliency);
    f.write(path);
}

inline Sample read_sample(const std::string& path) {
    MttFile f = MttFile::read(path);
    Sample s;
    s.image = f.tensor<float>("image");
    s.semseg = f.tensor<int32_t>("semseg");
    s.depth = f.tensor<float>("depth");
    s.normal = f.tensor<float>("normal");
    s.edge = f.tensor<uint8_t>("edge");
    if (f.contains("saliency")) s.saliency = f.tensor<uint8_t>("saliency");
    return s;
}

struct GenOptions {
    std::string root;
    int train = 200, val = 50;
    int height = 64, width = 64;
    int classes = 5;
    uint64_t seed = 0;
    int min_objects = 3, max_objects = 6;
    bool with_saliency = false;
    int threads = 1;
};

// Per-sample seeds derive from the dataset seed xor a global sample index, so
// generation parallelizes without any shared random state.
inline DatasetManifest generate_dataset(const GenOptions& opt) {
    if (opt.classes < 2) throw ConfigError("generate_dataset: classes must be >= 2");
    if (opt.train < 1 || opt.val < 0) throw ConfigError("generate_dataset: bad split sizes");

    namespace fs = std::filesystem;
    fs::create_directories(fs::path(opt.root) / "train");
    fs::create_directories(fs::path(opt.root) / "val");

    DatasetManifest m;
    m.classes = opt.classes;
    m.seed = opt.seed;
    m.height = opt.height;
    m.width = opt.width;
    m.with_saliency = opt.with_saliency;
    m.splits = {{"train", opt.train}, {"val", opt.val}};

    const int total = opt.train + opt.val;
    parallel_for(total, opt.threads, [&](int i) {
        const bool is_train = i < opt.train;
        const int local = is_train ? i : i - opt.train;
        uint64_t sm = opt.seed ^ static_cast<uint64_t>(i);
        Rng pick(splitmix64(sm));
        const int objs = opt.min_objects +
                         static_cast<int>(pick.next_below(static_cast<uint64_t>(opt.max_objects - opt.min_objects + 1)));
        Sample s = gen_scene(opt.seed ^ static_cast<uint64_t>(i), opt.height, opt.width, opt.classes, objs);
        const fs::path p = fs::path(opt.root) / (is_train ? "train" : "val") / sample_filename(local);
        write_sample(p.string(), s, opt.with_saliency);
    });

    std::ofstream mf(fs::path(opt.root) / "manifest.json");
    if (!mf) throw IoError("generate_dataset: cannot write manifest");
    mf << m.to_json().dump(2) << "\n";
    return m;
}

struct Dataset {
    DatasetManifest manifest;
    std::vector<Sample> samples;
    int height() const { return manifest.height; }
    int width() const { return manifest.width; }
    int classes() const { return manifest.classes; }
    size_t size() const { return samples.size(); }
};

// Loads a whole split into memory, validating manifest and shapes before the
// first sample is handed out.
inline Dataset load_dataset(const std::string& root, const std::string& split) {
    namespace fs = std::filesystem;
    const fs::path mpath = fs::path(root) / "manifest.json";
    std::ifstream mf(mpath);
    if (!mf) throw IoError("load_dataset: missing manifest at " + mpath.string());
    nlohmann::json j;
    try {
        mf >> j;
    } catch (const std::exception& e) {
        throw IoError("load_dataset: manifest parse failure: " + std::string(e.what()));
    }

    Dataset d;
    d.manifest = DatasetManifest::from_json(j);
    int count = -1;
    for (const auto& [name, c] : d.manifest.splits)
        if (name == split) count = c;
    if (count < 0) throw IoError("load_dataset: split '" + split + "' not in manifest");

    // fail fast: every listed file must exist before anything parses
    for (int i = 0; i < count; ++i) {
        const fs::path p = fs::path(root) / split / sample_filename(i);
        if (!fs::exists(p)) throw IoError("load_dataset: manifest/disk mismatch, missing " + p.string());
    }

    d.samples.resize(static_cast<size_t>(count));
    std::string first_error;
    parallel_for(count, 1, [&](int i) {
        const fs::path p = fs::path(root) / split / sample_filename(i);
        Sample s;
        try {
            s = read_sample(p.string());
        } catch (const std::exception& e) {
            throw IoError("load_dataset: sample " + std::to_string(i) + ": " + e.what());
        }
        if (s.image.shape() != std::vector<int>{d.manifest.height, d.manifest.width, 3} ||
            s.semseg.shape() != std::vector<int>{d.manifest.height, d.manifest.width})
            throw IoError("load_dataset: sample " + std::to_string(i) + " shape mismatch vs manifest");
        d.samples[static_cast<size_t>(i)] = std::move(s);
    });
    return d;
}

} // namespace mtp
