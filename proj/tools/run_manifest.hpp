#pragma once

// Per-command run manifest: config snapshot, seed, input/output hashes and
// stage timings, written atomically when the command finishes.

#include "matlift/scene_io.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <filesystem>
#include <functional>
#include <string>

namespace matlift::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline std::string sha256_hex(const std::vector<char> &bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256: digest failed");
    static const char *hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

inline std::string sha256_file(const fs::path &path) { return sha256_hex(detail::read_bytes(path)); }

/// Relative path with forward slashes, used as the manifest key.
inline std::string rel_key(const fs::path &root, const fs::path &p) { return fs::relative(p, root).generic_string(); }

/// Throws when a file recorded as the output of an earlier stage has changed since.
inline void check_upstream(const fs::path &root, const fs::path &file) {
    const fs::path dir = root / "manifests";
    if (!fs::exists(dir)) return;
    const std::string key = rel_key(root, file);
    for (const auto &entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() != ".json") continue;
        const auto bytes = detail::read_bytes(entry.path());
        const json m = json::parse(bytes.begin(), bytes.end(), nullptr, false);
        if (m.is_discarded() || !m.contains("outputs") || !m["outputs"].contains(key)) continue;
        if (!fs::exists(file))
            throw ValidationError("upstream output " + key + " recorded by '" + m.value("command", "?") + "' is missing");
        if (m["outputs"][key].get<std::string>() != sha256_file(file))
            throw ValidationError("upstream output " + key + " changed since '" + m.value("command", "?") +
                                  "' wrote it; rerun that stage");
    }
}

class RunRecorder {
public:
    RunRecorder(std::string command, fs::path root, std::vector<std::string> argv)
        : command_(std::move(command)), root_(std::move(root)), argv_(std::move(argv)) {}

    /// Hashes an input file after checking it against upstream manifests.
    void input(const fs::path &file) {
        check_upstream(root_, file);
        inputs_[rel_key(root_, file)] = sha256_file(file);
    }
    void output(const fs::path &file) { outputs_[rel_key(root_, file)] = sha256_file(file); }
    void output_tree(const fs::path &dir) {
        for (const auto &e : fs::recursive_directory_iterator(dir))
            if (e.is_regular_file() && e.path().parent_path().filename() != "manifests") output(e.path());
    }

    template <class F>
    auto stage(const std::string &name, F &&fn) {
        const auto start = std::chrono::steady_clock::now();
        struct Record {
            RunRecorder *self;
            std::string name;
            std::chrono::steady_clock::time_point start;
            ~Record() { self->timings_[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); }
        } record{this, name, start};
        return fn();
    }

    void write(const std::string &file_stem, const json &config, std::uint64_t seed, const std::string &version) const {
        fs::create_directories(root_ / "manifests");
        const json m{{"format", "matlift-run"},
                     {"command", command_},
                     {"argv", argv_},
                     {"config", config},
                     {"seed", seed},
                     {"version", version},
                     {"inputs", inputs_},
                     {"outputs", outputs_},
                     {"timings_seconds", timings_}};
        detail::write_text_atomic(root_ / "manifests" / (file_stem + ".json"), m.dump(2) + "\n");
    }

private:
    std::string command_;
    fs::path root_;
    std::vector<std::string> argv_;
    json inputs_ = json::object();
    json outputs_ = json::object();
    json timings_ = json::object();
};

} // namespace matlift::cli
