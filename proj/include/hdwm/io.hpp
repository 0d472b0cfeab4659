// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats and configuration. Checkpoints ("HDWM") carry named
// parameter blocks with a config digest and trailing checksum; datasets
// ("HDDS") carry clips; drift reports serialize to CSV. Everything numeric
// is little-endian 32-bit IEEE-754 on disk. The run configuration is a
// strict JSON tree: unknown keys are fatal.

#pragma once

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hdwm/denoiser.hpp"
#include "hdwm/metrics.hpp"
#include "hdwm/srr.hpp"
#include "hdwm/trd.hpp"
#include "hdwm/worldsim.hpp"

namespace hdwm {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Little-endian byte sink/source with a streaming FNV-1a checksum
// ---------------------------------------------------------------------------

struct Fnv1a {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    void eat(const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001B3ULL;
        }
    }
};

inline std::uint64_t fnv1a(const std::string& s) {
    Fnv1a f;
    f.eat(s.data(), s.size());
    return f.h;
}

class ByteWriter {
public:
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void f32(float v) { raw(&v, 4); }
    void bytes(const void* p, std::size_t n) { raw(p, n); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    std::uint64_t checksum() const { return hash_.h; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + path);
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw IoError("write failed: " + path);
    }

private:
    void raw(const void* p, std::size_t n) {
        static_assert(std::endian::native == std::endian::little,
                      "little-endian host required for the on-disk formats");
        const char* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
        hash_.eat(p, n);
    }
    std::vector<char> buf_;
    Fnv1a hash_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<char> data) : buf_(std::move(data)) {}

    static ByteReader from_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open for reading: " + path);
        std::vector<char> data((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
        return ByteReader(std::move(data));
    }

    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, 8);
        return v;
    }
    float f32() {
        float v;
        raw(&v, 4);
        return v;
    }
    void bytes(void* p, std::size_t n) { raw(p, n); }
    std::string str() {
        const std::uint32_t n = u32();
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
    // read without feeding the checksum (for the trailing checksum itself)
    std::uint64_t u64_unhashed() {
        if (pos_ + 8 > buf_.size()) throw IoError("truncated file");
        std::uint64_t v;
        std::memcpy(&v, buf_.data() + pos_, 8);
        pos_ += 8;
        return v;
    }
    std::uint64_t checksum() const { return hash_.h; }
    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    void raw(void* p, std::size_t n) {
        if (pos_ + n > buf_.size()) throw IoError("truncated file");
        std::memcpy(p, buf_.data() + pos_, n);
        hash_.eat(buf_.data() + pos_, n);
        pos_ += n;
    }
    std::vector<char> buf_;
    std::size_t pos_ = 0;
    Fnv1a hash_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "HDWM" | version | config digest | named blocks | checksum
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_checkpoint(const std::string& path, const NamedParams& params,
                            std::uint64_t config_digest) {
    ByteWriter w;
    w.bytes("HDWM", 4);
    w.u32(kCheckpointVersion);
    w.u64(config_digest);
    w.u32(static_cast<std::uint32_t>(params.items.size()));
    for (const auto& [name, t] : params.items) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t->shape.size()));
        for (int d : t->shape) w.u32(static_cast<std::uint32_t>(d));
        for (float v : t->data) w.f32(v);
    }
    w.u64(w.checksum());
    w.save(path);
}

struct CheckpointData {
    std::uint64_t config_digest = 0;
    NamedParams params;
};

inline CheckpointData load_checkpoint(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "HDWM", 4) != 0) throw IoError("not a checkpoint file: " + path);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    CheckpointData out;
    out.config_digest = r.u64();
    const std::uint32_t blocks = r.u32();
    for (std::uint32_t b = 0; b < blocks; ++b) {
        const std::string name = r.str();
        const std::uint32_t ndim = r.u32();
        std::vector<int> shape(ndim);
        std::int64_t numel = 1;
        for (auto& d : shape) {
            d = static_cast<int>(r.u32());
            numel *= d;
        }
        std::vector<float> data(static_cast<std::size_t>(numel));
        for (auto& v : data) v = r.f32();
        out.params.items.emplace_back(name, Tensor::create(std::move(shape), std::move(data)));
    }
    const std::uint64_t expect = r.checksum();
    const std::uint64_t stored = r.u64_unhashed();
    if (stored != expect) throw IoError("checkpoint checksum mismatch: " + path);
    if (r.remaining() != 0) throw IoError("trailing bytes in checkpoint: " + path);
    return out;
}

// Apply loaded blocks onto a live parameter set; names and shapes must match.
inline void apply_checkpoint(DenoiserParams& params, const CheckpointData& ckpt,
                             std::uint64_t expected_digest, bool allow_mismatch) {
    if (!allow_mismatch && ckpt.config_digest != expected_digest)
        throw ConfigError("checkpoint config digest mismatch (use the override flag to load "
                          "anyway)");
    params.named.copy_from(ckpt.params);
}

// ---------------------------------------------------------------------------
// Datasets: "HDDS" | version | counts | per-clip records
// ---------------------------------------------------------------------------

inline void save_dataset(const std::string& path, const std::vector<Clip>& clips) {
    require(!clips.empty(), "save_dataset: no clips");
    const Clip& first = clips.front();
    for (const auto& c : clips)
        require(c.frames == first.frames && c.latent_dim == first.latent_dim &&
                    c.layout_dim == first.layout_dim &&
                    c.anchor_ids.size() == first.anchor_ids.size(),
                "save_dataset: clips are not homogeneous");
    ByteWriter w;
    w.bytes("HDDS", 4);
    w.u32(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(clips.size()));
    w.u32(static_cast<std::uint32_t>(first.frames));
    w.u32(static_cast<std::uint32_t>(first.latent_dim));
    w.u32(static_cast<std::uint32_t>(first.layout_dim));
    w.u32(static_cast<std::uint32_t>(first.anchor_ids.size()));
    for (const auto& c : clips) {
        w.u64(c.seed);
        for (int id : c.anchor_ids) w.u32(static_cast<std::uint32_t>(id));
        for (const auto& pose : c.poses) {
            w.f32(static_cast<float>(pose.x));
            w.f32(static_cast<float>(pose.y));
            w.f32(static_cast<float>(pose.yaw));
            w.f32(static_cast<float>(pose.speed));
        }
        for (float v : c.latents) w.f32(v);
        for (const auto& a : c.actions)
            for (float v : a) w.f32(v);
        for (float v : c.layout) w.f32(v);
    }
    w.save(path);
}

inline std::vector<Clip> load_dataset(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "HDDS", 4) != 0) throw IoError("not a dataset file: " + path);
    const std::uint32_t version = r.u32();
    if (version != kDatasetVersion)
        throw IoError("unsupported dataset version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    const int frames = static_cast<int>(r.u32());
    const int d_z = static_cast<int>(r.u32());
    const int layout_dim = static_cast<int>(r.u32());
    const std::uint32_t anchors = r.u32();
    std::vector<Clip> clips;
    clips.reserve(count);
    for (std::uint32_t c = 0; c < count; ++c) {
        Clip clip;
        clip.frames = frames;
        clip.latent_dim = d_z;
        clip.layout_dim = layout_dim;
        clip.seed = r.u64();
        clip.anchor_ids.resize(anchors);
        for (auto& id : clip.anchor_ids) id = static_cast<int>(r.u32());
        clip.poses.resize(static_cast<std::size_t>(frames));
        for (auto& pose : clip.poses) {
            pose.x = r.f32();
            pose.y = r.f32();
            pose.yaw = r.f32();
            pose.speed = r.f32();
        }
        clip.latents.resize(static_cast<std::size_t>(frames) * d_z);
        for (auto& v : clip.latents) v = r.f32();
        clip.actions.resize(static_cast<std::size_t>(frames - 1));
        for (auto& a : clip.actions)
            for (auto& v : a) v = r.f32();
        clip.layout.resize(static_cast<std::size_t>(frames) * layout_dim);
        for (auto& v : clip.layout) v = r.f32();
        clips.push_back(std::move(clip));
    }
    if (r.remaining() != 0) throw IoError("dataset payload does not match header: " + path);
    return clips;
}

// Dataset generation entry point: deterministic per seed, written in the
// binary format above.
inline void make_dataset(const WorldConfig& cfg, std::uint64_t seed, int clips, int frames,
                         const std::string& path) {
    save_dataset(path, make_clips(cfg, seed, clips, frames));
}

// ---------------------------------------------------------------------------
// CSV drift reports
// ---------------------------------------------------------------------------

inline constexpr const char* kReportHeader = "chunk,lfd_cumulative,are_deg,dtw";

inline void write_report(const DriftReport& report, const std::string& path) {
    require(!report.rows.empty(), "write_report: empty report");
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw IoError("cannot open for writing: " + path);
    std::fprintf(f, "%s\n", kReportHeader);
    for (const auto& row : report.rows)
        std::fprintf(f, "%d,%.6g,%.6g,%.6g\n", row.chunk, row.lfd, row.are_deg, row.dtw);
    if (std::fclose(f) != 0) throw IoError("write failed: " + path);
}

inline DriftReport read_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::string line;
    if (!std::getline(in, line) || line != kReportHeader)
        throw IoError("bad report header in " + path);
    DriftReport report;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        DriftRow row;
        if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &row.chunk, &row.lfd, &row.are_deg,
                        &row.dtw) != 4)
            throw IoError("bad report row in " + path + ": " + line);
        report.rows.push_back(row);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Run configuration (strict JSON)
// ---------------------------------------------------------------------------

struct RunConfig {
    std::uint64_t seed = 1;

    struct Data {
        int clips = 24;
        int frames = 48;
    } data;

    WorldConfig world;
    DenoiserConfig denoiser;  // latent_dim/layout_dim derived from world

    struct Train {
        int T = 8;
        int K = 4;
        float lr = 1e-3f;
        float weight_decay = 1e-2f;
        long steps = 2000;
        int t_grid = 32;
    } train;

    SrrConfig srr;
    TrdConfig trd;

    struct Diffusion {
        int teacher_steps = 16;  // Euler steps for the multi-step model
    } diffusion;

    struct Eval {
        int rollout_depth = 10;
        int clips = 8;
    } eval;

    void derive_and_validate() {
        world.validate();
        denoiser.latent_dim = world.latent_dim();
        denoiser.layout_dim = world.layout_dim();
        denoiser.validate();
        require(train.T >= 1 && train.K >= 1 && train.steps >= 0, "config: bad train section");
        srr.T = train.T;
        srr.K = train.K;
        srr.t_grid = train.t_grid;
        srr.cache_sampler_steps = diffusion.teacher_steps;
        srr.validate();
        trd.t_grid = train.t_grid;
        trd.teacher_steps = diffusion.teacher_steps;
        trd.validate();
        require(data.frames >= train.T + srr.cache_depth() * train.K,
                "config: clips too short for the SRR cache depth");
        require(data.frames >= train.T + eval.rollout_depth * train.K,
                "config: clips too short for the eval rollout depth");
        require(data.frames >= trd.T + trd.rollout_depth * trd.student_chunk,
                "config: clips too short for the TRD rollout");
        require(train.T + train.K <= denoiser.max_frames &&
                    trd.T + trd.teacher_chunk <= denoiser.max_frames,
                "config: window exceeds denoiser max_frames");
        require(eval.clips >= 1 && eval.clips <= data.clips, "config: bad eval clip count");
    }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                       const std::string& section) {
    if (!j.is_object()) throw ConfigError("config section " + section + " must be an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool ok = false;
        for (const auto& a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError("unknown config key: " + section + "." + key);
    }
}

template <typename T>
void get_to(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            j.at(key).get_to(out);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("bad value for config key ") + key + ": " + e.what());
        }
    }
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
    RunConfig c;
    detail::check_keys(
        j, {"seed", "data", "world", "denoiser", "train", "srr", "trd", "diffusion", "eval"},
        "(root)");
    detail::get_to(j, "seed", c.seed);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::check_keys(d, {"clips", "frames"}, "data");
        detail::get_to(d, "clips", c.data.clips);
        detail::get_to(d, "frames", c.data.frames);
    }
    if (j.contains("world")) {
        const auto& w = j.at("world");
        detail::check_keys(w,
                           {"landmarks", "anchors", "layout_landmarks", "box_half",
                            "track_points", "track_step", "lookahead", "steer_gain", "omega_cap",
                            "accel_cap", "speed_period", "coord_scale", "curv_scale"},
                           "world");
        detail::get_to(w, "landmarks", c.world.landmarks);
        detail::get_to(w, "anchors", c.world.anchors);
        detail::get_to(w, "layout_landmarks", c.world.layout_landmarks);
        detail::get_to(w, "box_half", c.world.box_half);
        detail::get_to(w, "track_points", c.world.track_points);
        detail::get_to(w, "track_step", c.world.track_step);
        detail::get_to(w, "lookahead", c.world.lookahead);
        detail::get_to(w, "steer_gain", c.world.steer_gain);
        detail::get_to(w, "omega_cap", c.world.omega_cap);
        detail::get_to(w, "accel_cap", c.world.accel_cap);
        detail::get_to(w, "speed_period", c.world.speed_period);
        detail::get_to(w, "coord_scale", c.world.coord_scale);
        detail::get_to(w, "curv_scale", c.world.curv_scale);
    }
    if (j.contains("denoiser")) {
        const auto& d = j.at("denoiser");
        detail::check_keys(
            d, {"width", "layers", "heads", "max_frames", "noise_emb_dim", "action_emb_dim"},
            "denoiser");
        detail::get_to(d, "width", c.denoiser.width);
        detail::get_to(d, "layers", c.denoiser.layers);
        detail::get_to(d, "heads", c.denoiser.heads);
        detail::get_to(d, "max_frames", c.denoiser.max_frames);
        detail::get_to(d, "noise_emb_dim", c.denoiser.noise_emb_dim);
        detail::get_to(d, "action_emb_dim", c.denoiser.action_emb_dim);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::check_keys(t, {"T", "K", "lr", "weight_decay", "steps", "t_grid"}, "train");
        detail::get_to(t, "T", c.train.T);
        detail::get_to(t, "K", c.train.K);
        detail::get_to(t, "lr", c.train.lr);
        detail::get_to(t, "weight_decay", c.train.weight_decay);
        detail::get_to(t, "steps", c.train.steps);
        detail::get_to(t, "t_grid", c.train.t_grid);
    }
    if (j.contains("srr")) {
        const auto& s = j.at("srr");
        detail::check_keys(s,
                           {"steps", "refresh_period", "n_start", "n_end", "n_horizon",
                            "w_start", "w_end", "w_horizon", "blended_targets", "lr",
                            "weight_decay"},
                           "srr");
        detail::get_to(s, "steps", c.srr.steps);
        detail::get_to(s, "refresh_period", c.srr.refresh_period);
        detail::get_to(s, "n_start", c.srr.n_start);
        detail::get_to(s, "n_end", c.srr.n_end);
        detail::get_to(s, "n_horizon", c.srr.n_horizon);
        detail::get_to(s, "w_start", c.srr.w_start);
        detail::get_to(s, "w_end", c.srr.w_end);
        detail::get_to(s, "w_horizon", c.srr.w_horizon);
        detail::get_to(s, "blended_targets", c.srr.blended_targets);
        detail::get_to(s, "lr", c.srr.lr);
        detail::get_to(s, "weight_decay", c.srr.weight_decay);
    }
    if (j.contains("trd")) {
        const auto& t = j.at("trd");
        detail::check_keys(t,
                           {"T", "teacher_chunk", "student_chunk", "student_steps",
                            "rollout_depth", "dmd_interval", "cfg_scale", "cfg_plateau",
                            "cfg_plateau_end", "cfg_zero_step", "student_lr", "critic_lr",
                            "weight_decay", "steps"},
                           "trd");
        detail::get_to(t, "T", c.trd.T);
        detail::get_to(t, "teacher_chunk", c.trd.teacher_chunk);
        detail::get_to(t, "student_chunk", c.trd.student_chunk);
        detail::get_to(t, "student_steps", c.trd.student_steps);
        detail::get_to(t, "rollout_depth", c.trd.rollout_depth);
        detail::get_to(t, "dmd_interval", c.trd.dmd_interval);
        detail::get_to(t, "cfg_scale", c.trd.cfg_scale);
        detail::get_to(t, "cfg_plateau", c.trd.cfg_plateau);
        detail::get_to(t, "cfg_plateau_end", c.trd.cfg_plateau_end);
        detail::get_to(t, "cfg_zero_step", c.trd.cfg_zero_step);
        detail::get_to(t, "student_lr", c.trd.student_lr);
        detail::get_to(t, "critic_lr", c.trd.critic_lr);
        detail::get_to(t, "weight_decay", c.trd.weight_decay);
        detail::get_to(t, "steps", c.trd.steps);
    }
    if (j.contains("diffusion")) {
        const auto& d = j.at("diffusion");
        detail::check_keys(d, {"teacher_steps"}, "diffusion");
        detail::get_to(d, "teacher_steps", c.diffusion.teacher_steps);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        detail::check_keys(e, {"rollout_depth", "clips"}, "eval");
        detail::get_to(e, "rollout_depth", c.eval.rollout_depth);
        detail::get_to(e, "clips", c.eval.clips);
    }
    try {
        c.derive_and_validate();
    } catch (const ContractViolation& e) {
        throw ConfigError(e.what());
    }
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    return parse_config(j);
}

// Canonical serialization (sorted keys, full field set) and its digest.
inline std::string canonical_config(const RunConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["data"] = {{"clips", c.data.clips}, {"frames", c.data.frames}};
    j["world"] = {{"landmarks", c.world.landmarks},
                  {"anchors", c.world.anchors},
                  {"layout_landmarks", c.world.layout_landmarks},
                  {"box_half", c.world.box_half},
                  {"track_points", c.world.track_points},
                  {"track_step", c.world.track_step},
                  {"lookahead", c.world.lookahead},
                  {"steer_gain", c.world.steer_gain},
                  {"omega_cap", c.world.omega_cap},
                  {"accel_cap", c.world.accel_cap},
                  {"speed_period", c.world.speed_period},
                  {"coord_scale", c.world.coord_scale},
                  {"curv_scale", c.world.curv_scale}};
    j["denoiser"] = {{"width", c.denoiser.width},
                     {"layers", c.denoiser.layers},
                     {"heads", c.denoiser.heads},
                     {"max_frames", c.denoiser.max_frames},
                     {"noise_emb_dim", c.denoiser.noise_emb_dim},
                     {"action_emb_dim", c.denoiser.action_emb_dim}};
    j["train"] = {{"T", c.train.T},
                  {"K", c.train.K},
                  {"lr", c.train.lr},
                  {"weight_decay", c.train.weight_decay},
                  {"steps", c.train.steps},
                  {"t_grid", c.train.t_grid}};
    j["srr"] = {{"steps", c.srr.steps},
                {"refresh_period", c.srr.refresh_period},
                {"n_start", c.srr.n_start},
                {"n_end", c.srr.n_end},
                {"n_horizon", c.srr.n_horizon},
                {"w_start", c.srr.w_start},
                {"w_end", c.srr.w_end},
                {"w_horizon", c.srr.w_horizon},
                {"blended_targets", c.srr.blended_targets},
                {"lr", c.srr.lr},
                {"weight_decay", c.srr.weight_decay}};
    j["trd"] = {{"T", c.trd.T},
                {"teacher_chunk", c.trd.teacher_chunk},
                {"student_chunk", c.trd.student_chunk},
                {"student_steps", c.trd.student_steps},
                {"rollout_depth", c.trd.rollout_depth},
                {"dmd_interval", c.trd.dmd_interval},
                {"cfg_scale", c.trd.cfg_scale},
                {"cfg_plateau", c.trd.cfg_plateau},
                {"cfg_plateau_end", c.trd.cfg_plateau_end},
                {"cfg_zero_step", c.trd.cfg_zero_step},
                {"student_lr", c.trd.student_lr},
                {"critic_lr", c.trd.critic_lr},
                {"weight_decay", c.trd.weight_decay},
                {"steps", c.trd.steps}};
    j["diffusion"] = {{"teacher_steps", c.diffusion.teacher_steps}};
    j["eval"] = {{"rollout_depth", c.eval.rollout_depth}, {"clips", c.eval.clips}};
    return j.dump();
}

inline std::uint64_t config_digest(const RunConfig& c) { return fnv1a(canonical_config(c)); }

}  // namespace hdwm
