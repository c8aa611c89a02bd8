#pragma once

// On-disk scene layout:
//
//   <dir>/scene.json             versioned manifest (cameras, file references)
//   <dir>/gaussians.bin          binary Gaussian block
//   <dir>/images/view_NNNN.pfm   linear RGB per view
//   <dir>/maps/view_NNNN_{basecolor,roughness,metallic}.png
//   <dir>/environment.pfm

#include "matlift/scene.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace matlift {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kSceneFormatVersion = 1;
inline constexpr std::uint32_t kGaussianBlockVersion = 1;
inline constexpr char kGaussianMagic[4] = {'M', 'L', 'G', 'S'};

namespace detail {

class ByteWriter {
public:
    template <class T>
    void put(const T &v) {
        const auto *p = reinterpret_cast<const char *>(&v);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }
    void put_raw(const char *p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
    void put_vec3(const Vec3 &v) {
        for (int i = 0; i < 3; ++i) put(v[i]);
    }
    void put_material(const MaterialSample &m) {
        for (double v : m.to_array()) put(v);
    }
    const std::vector<char> &bytes() const { return bytes_; }

private:
    std::vector<char> bytes_;
};

class ByteReader {
public:
    ByteReader(const std::vector<char> &bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    template <class T>
    T get() {
        if (pos_ + sizeof(T) > bytes_.size()) throw ParseError(what_ + ": unexpected end of data", bytes_.size());
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void get_raw(char *dst, std::size_t n) {
        if (pos_ + n > bytes_.size()) throw ParseError(what_ + ": unexpected end of data", bytes_.size());
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }
    Vec3 get_vec3() {
        Vec3 v;
        for (int i = 0; i < 3; ++i) v[i] = get<double>();
        return v;
    }
    MaterialSample get_material() {
        std::array<double, 5> a{};
        for (auto &v : a) v = get<double>();
        return MaterialSample::from_array(a);
    }
    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == bytes_.size(); }
    [[noreturn]] void fail(const std::string &msg, std::size_t at) const { throw ParseError(what_ + ": " + msg, at); }

private:
    const std::vector<char> &bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::vector<char> read_bytes(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Write to a sibling temp file, then rename, so readers never see a partial file.
inline void write_bytes_atomic(const fs::path &path, const char *data, std::size_t n) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
        out.write(data, static_cast<std::streamsize>(n));
        if (!out) throw Error("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

inline void write_text_atomic(const fs::path &path, const std::string &text) {
    write_bytes_atomic(path, text.data(), text.size());
}

inline json camera_to_json(const Camera &c) {
    json pose = json::array();
    for (int r = 0; r < 3; ++r) pose.push_back({c.rotation(r, 0), c.rotation(r, 1), c.rotation(r, 2), c.translation[r]});
    return {{"focal", {c.focal.x(), c.focal.y()}},
            {"principal_point", {c.principal.x(), c.principal.y()}},
            {"width", c.width},
            {"height", c.height},
            {"world_from_camera", pose}};
}

inline Camera camera_from_json(const json &j) {
    Camera c;
    c.focal = Vec2(j.at("focal").at(0).get<double>(), j.at("focal").at(1).get<double>());
    c.principal = Vec2(j.at("principal_point").at(0).get<double>(), j.at("principal_point").at(1).get<double>());
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    const auto &pose = j.at("world_from_camera");
    if (pose.size() != 3) throw ValidationError("camera: world_from_camera must be 3x4");
    for (int r = 0; r < 3; ++r) {
        if (pose.at(r).size() != 4) throw ValidationError("camera: world_from_camera must be 3x4");
        for (int k = 0; k < 3; ++k) c.rotation(r, k) = pose.at(r).at(k).get<double>();
        c.translation[r] = pose.at(r).at(3).get<double>();
    }
    return c;
}

inline std::string view_stem(std::size_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "view_%04zu", v);
    return buf;
}

} // namespace detail

/// Serializes Gaussians into the versioned binary block.
inline std::vector<char> encode_gaussians(std::span<const GaussianPrimitive> gaussians) {
    std::uint32_t views = 0;
    for (const auto &g : gaussians)
        if (!g.per_view.empty()) views = static_cast<std::uint32_t>(g.per_view.size());
    for (const auto &g : gaussians)
        if (!g.per_view.empty() && g.per_view.size() != views)
            throw ValidationError("gaussians: inconsistent per-view slot counts");

    detail::ByteWriter w;
    w.put_raw(kGaussianMagic, 4);
    w.put(kGaussianBlockVersion);
    w.put(static_cast<std::uint64_t>(gaussians.size()));
    w.put(views);
    for (const auto &g : gaussians) {
        w.put_vec3(g.mean);
        w.put_vec3(g.scale);
        w.put(g.rotation.w());
        w.put(g.rotation.x());
        w.put(g.rotation.y());
        w.put(g.rotation.z());
        w.put(g.opacity);
        w.put_vec3(g.normal);
        const std::uint8_t flags = (g.per_view.empty() ? 0 : 1) | (g.merged ? 2 : 0) | (g.reference ? 4 : 0);
        w.put(flags);
        for (const auto &slot : g.per_view) {
            w.put(static_cast<std::uint8_t>(slot.seen ? 1 : 0));
            w.put_material(slot.value);
        }
        if (g.merged) w.put_material(*g.merged);
        if (g.reference) w.put_material(*g.reference);
    }
    return w.bytes();
}

inline std::vector<GaussianPrimitive> decode_gaussians(const std::vector<char> &bytes, const std::string &what = "gaussians") {
    detail::ByteReader r(bytes, what);
    char magic[4];
    r.get_raw(magic, 4);
    if (std::memcmp(magic, kGaussianMagic, 4) != 0) r.fail("bad magic", 0);
    const auto version = r.get<std::uint32_t>();
    if (version != kGaussianBlockVersion)
        throw VersionMismatch(what + ": block version " + std::to_string(version) + ", expected " +
                              std::to_string(kGaussianBlockVersion));
    const auto count = r.get<std::uint64_t>();
    const auto views = r.get<std::uint32_t>();
    if (count > bytes.size()) r.fail("implausible gaussian count", 8);
    std::vector<GaussianPrimitive> out;
    out.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        GaussianPrimitive g;
        g.mean = r.get_vec3();
        g.scale = r.get_vec3();
        const double qw = r.get<double>(), qx = r.get<double>(), qy = r.get<double>(), qz = r.get<double>();
        g.rotation = Quat(qw, qx, qy, qz);
        g.opacity = r.get<double>();
        g.normal = r.get_vec3();
        const auto flag_at = r.offset();
        const auto flags = r.get<std::uint8_t>();
        if (flags & ~7u) r.fail("unknown flag bits", flag_at);
        if (flags & 1) {
            g.per_view.resize(views);
            for (auto &slot : g.per_view) {
                const auto seen_at = r.offset();
                const auto seen = r.get<std::uint8_t>();
                if (seen > 1) r.fail("bad seen flag", seen_at);
                slot.seen = seen == 1;
                slot.value = r.get_material();
            }
        }
        if (flags & 2) g.merged = r.get_material();
        if (flags & 4) g.reference = r.get_material();
        out.push_back(std::move(g));
    }
    if (!r.at_end()) r.fail("trailing bytes after gaussian block", r.offset());
    return out;
}

inline void write_gaussians(const fs::path &path, std::span<const GaussianPrimitive> gaussians) {
    const auto bytes = encode_gaussians(gaussians);
    detail::write_bytes_atomic(path, bytes.data(), bytes.size());
}

inline std::vector<GaussianPrimitive> read_gaussians(const fs::path &path) {
    return decode_gaussians(detail::read_bytes(path), path.filename().string());
}

inline void write_material_maps(const fs::path &dir, std::size_t view, const MaterialMaps &maps) {
    const std::string stem = detail::view_stem(view);
    write_png(dir / (stem + "_basecolor.png"), maps.basecolor, true);
    write_png(dir / (stem + "_roughness.png"), maps.roughness, false);
    write_png(dir / (stem + "_metallic.png"), maps.metallic, false);
}

inline MaterialMaps read_material_maps(const fs::path &basecolor, const fs::path &roughness, const fs::path &metallic) {
    return {read_png(basecolor, true), read_png(roughness, false), read_png(metallic, false)};
}

/// Writes the bundle under `dir` (created if missing). The manifest is written last.
inline void save_scene(const SceneBundle &bundle, const fs::path &dir) {
    bundle.validate();
    fs::create_directories(dir / "images");
    if (bundle.material_maps) fs::create_directories(dir / "maps");

    write_gaussians(dir / "gaussians.bin", bundle.gaussians);
    write_pfm(dir / "environment.pfm", bundle.env.to_image());

    json views = json::array();
    for (std::size_t v = 0; v < bundle.cameras.size(); ++v) {
        const std::string stem = detail::view_stem(v);
        json entry{{"camera", detail::camera_to_json(bundle.cameras[v])}, {"image", "images/" + stem + ".pfm"}};
        write_pfm(dir / "images" / (stem + ".pfm"), bundle.images[v]);
        if (bundle.material_maps) {
            write_material_maps(dir / "maps", v, (*bundle.material_maps)[v]);
            entry["material_maps"] = {{"basecolor", "maps/" + stem + "_basecolor.png"},
                                      {"roughness", "maps/" + stem + "_roughness.png"},
                                      {"metallic", "maps/" + stem + "_metallic.png"}};
        }
        views.push_back(std::move(entry));
    }
    const json manifest{{"format", "matlift-scene"},
                        {"version", kSceneFormatVersion},
                        {"gaussians", "gaussians.bin"},
                        {"environment", "environment.pfm"},
                        {"views", views}};
    detail::write_text_atomic(dir / "scene.json", manifest.dump(2) + "\n");
}

inline json read_manifest(const fs::path &path) {
    const auto bytes = detail::read_bytes(path);
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error &e) {
        throw ParseError(path.filename().string() + ": " + e.what(), e.byte);
    }
}

/// Loads a bundle from a scene directory (or its scene.json). The result is validated.
inline SceneBundle load_scene(const fs::path &path) {
    const fs::path manifest_path = fs::is_directory(path) ? path / "scene.json" : path;
    const fs::path dir = manifest_path.parent_path();
    const json m = read_manifest(manifest_path);

    SceneBundle bundle;
    try {
        if (m.at("format").get<std::string>() != "matlift-scene") throw ValidationError("scene: unknown format tag");
        const int version = m.at("version").get<int>();
        if (version != kSceneFormatVersion)
            throw VersionMismatch("scene: manifest version " + std::to_string(version) + ", expected " +
                                  std::to_string(kSceneFormatVersion));
        std::vector<std::string> missing;
        auto require = [&](const json &ref) {
            const fs::path p = dir / ref.get<std::string>();
            if (!fs::exists(p)) missing.push_back(p.string());
        };
        require(m.at("gaussians"));
        require(m.at("environment"));
        for (const auto &view : m.at("views")) {
            require(view.at("image"));
            if (view.contains("material_maps"))
                for (const char *k : {"basecolor", "roughness", "metallic"}) require(view.at("material_maps").at(k));
        }
        if (!missing.empty()) {
            std::string list;
            for (const auto &p : missing) list += "\n  " + p;
            throw ValidationError("scene: missing files:" + list);
        }

        bundle.gaussians = read_gaussians(dir / m.at("gaussians").get<std::string>());
        bundle.env = EnvironmentMap::from_image(read_pfm(dir / m.at("environment").get<std::string>()));
        bool any_maps = false, all_maps = true;
        std::vector<MaterialMaps> maps;
        for (const auto &view : m.at("views")) {
            bundle.cameras.push_back(detail::camera_from_json(view.at("camera")));
            bundle.images.push_back(read_pfm(dir / view.at("image").get<std::string>()));
            if (view.contains("material_maps")) {
                const auto &mm = view.at("material_maps");
                any_maps = true;
                maps.push_back(read_material_maps(dir / mm.at("basecolor").get<std::string>(),
                                                  dir / mm.at("roughness").get<std::string>(),
                                                  dir / mm.at("metallic").get<std::string>()));
            } else {
                all_maps = false;
            }
        }
        if (any_maps && !all_maps) throw ValidationError("scene: material maps present for only some views");
        if (any_maps) bundle.material_maps = std::move(maps);
    } catch (const json::exception &e) {
        throw ValidationError(std::string("scene manifest: ") + e.what());
    }
    bundle.validate();
    return bundle;
}

} // namespace matlift
