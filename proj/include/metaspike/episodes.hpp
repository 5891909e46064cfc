#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "metaspike/errors.hpp"
#include "metaspike/events.hpp"
#include "metaspike/rng.hpp"
#include "metaspike/tensor.hpp"

// Task construction: ordered class pairs as tasks, meta train/val/test splits
// over them, N-shot K-way episode sampling, and a synthetic event-class
// generator so the full pipeline runs without any recorded corpus.

namespace metaspike::episodes {

using events::Event;
using events::EventStream;
using events::FrameSequence;

struct TaskPair {
    int a = 0;
    int b = 0;
    bool operator==(const TaskPair&) const = default;
};

struct MetaSplit {
    std::vector<TaskPair> train, val, test;
    std::uint64_t seed = 0;
};

// Tasks are all ordered pairs over the class set, same-class pairs included
// (n classes -> n^2 tasks), shuffled deterministically and partitioned.
inline MetaSplit make_meta_splits(const std::vector<int>& class_ids, std::size_t n_train,
                                  std::size_t n_val, std::size_t n_test, std::uint64_t seed) {
    std::vector<TaskPair> all;
    all.reserve(class_ids.size() * class_ids.size());
    for (int a : class_ids)
        for (int b : class_ids) all.push_back({a, b});
    if (n_train + n_val + n_test > all.size())
        throw StructuralError("meta split sizes " + std::to_string(n_train + n_val + n_test) +
                              " exceed task count " + std::to_string(all.size()));
    Rng rng(seed);
    rng.shuffle(all);
    MetaSplit split;
    split.seed = seed;
    split.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.val.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                     all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    split.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val),
                      all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val + n_test));
    return split;
}

// Alternative split construction: partition the classes themselves, then
// take all ordered pairs within each subset. Episodes in one part never see
// a class from another part.
inline MetaSplit make_class_splits(const std::vector<int>& class_ids, std::size_t n_train,
                                   std::size_t n_val, std::size_t n_test, std::uint64_t seed) {
    if (n_train + n_val + n_test > class_ids.size())
        throw StructuralError("class split sizes exceed the class count");
    std::vector<int> order = class_ids;
    Rng rng(seed);
    rng.shuffle(order);
    MetaSplit split;
    split.seed = seed;
    auto pairs_of = [](std::vector<int>::const_iterator b, std::vector<int>::const_iterator e) {
        std::vector<TaskPair> out;
        for (auto i = b; i != e; ++i)
            for (auto j = b; j != e; ++j) out.push_back({*i, *j});
        return out;
    };
    auto it = order.cbegin();
    split.train = pairs_of(it, it + static_cast<std::ptrdiff_t>(n_train));
    it += static_cast<std::ptrdiff_t>(n_train);
    split.val = pairs_of(it, it + static_cast<std::ptrdiff_t>(n_val));
    it += static_cast<std::ptrdiff_t>(n_val);
    split.test = pairs_of(it, it + static_cast<std::ptrdiff_t>(n_test));
    return split;
}

inline std::string write_split_manifest(const MetaSplit& s) {
    std::ostringstream out;
    out << "# metaspike-split seed=" << s.seed << "\n";
    auto emit = [&](const char* part, const std::vector<TaskPair>& tasks) {
        for (const TaskPair& t : tasks) out << part << " " << t.a << " " << t.b << "\n";
    };
    emit("train", s.train);
    emit("val", s.val);
    emit("test", s.test);
    return out.str();
}

inline MetaSplit read_split_manifest(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    MetaSplit s;
    bool have_header = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto pos = line.find("seed=");
            if (pos == std::string::npos)
                throw FormatError("split manifest header missing seed (line " + std::to_string(lineno) + ")");
            s.seed = std::stoull(line.substr(pos + 5));
            have_header = true;
            continue;
        }
        std::istringstream ls(line);
        std::string part;
        TaskPair t;
        if (!(ls >> part >> t.a >> t.b))
            throw FormatError("bad split manifest line " + std::to_string(lineno) + ": '" + line + "'");
        if (part == "train")
            s.train.push_back(t);
        else if (part == "val")
            s.val.push_back(t);
        else if (part == "test")
            s.test.push_back(t);
        else
            throw FormatError("unknown split part '" + part + "' (line " + std::to_string(lineno) + ")");
    }
    if (!have_header) throw FormatError("split manifest missing seed header");
    return s;
}

// ---- synthetic classes -----------------------------------------------------

struct SynthConfig {
    std::uint16_t width = 16;
    std::uint16_t height = 16;
    std::uint32_t duration_us = 100000;
    double noise_rate = 0.1;      // events per pixel per 100 ms
    double emit_interval_us = 250; // one ON+OFF pair per interval
    double speed_diagonals = 1.5;  // path length over the duration, in diagonals
};

namespace detail {

// Reflect an unbounded coordinate into [0, limit].
inline double fold(double x, double limit) {
    if (limit <= 0) return 0;
    const double period = 2.0 * limit;
    double u = std::fmod(x, period);
    if (u < 0) u += period;
    return u <= limit ? u : period - u;
}

}  // namespace detail

// Each class is an oriented dot sweeping the field at a class-specific
// angle (multiples of the golden angle), emitting ON events at its position
// and OFF events trailing behind, over Poisson background noise. Jitter in
// start offset and speed comes from the sample seed.
inline EventStream synth_class(int class_id, std::uint64_t sample_seed, const SynthConfig& cfg) {
    if (cfg.width < 8 || cfg.height < 8) throw StructuralError("synth_class: geometry must be >= 8x8");
    if (cfg.duration_us < 50000) throw StructuralError("synth_class: duration must be >= 50 ms");
    constexpr double kGoldenAngle = 2.399963229728653; // pi * (3 - sqrt(5))
    Rng rng(sample_seed);

    const double angle = class_id * kGoldenAngle;
    const double dx = std::cos(angle), dy = std::sin(angle);
    const double diag = std::hypot(double(cfg.width), double(cfg.height));
    const double duration_ms = cfg.duration_us / 1000.0;
    const double speed = cfg.speed_diagonals * diag / duration_ms; // px per ms
    const double speed_jitter = 1.0 + 0.1 * (2.0 * rng.uniform() - 1.0);
    const double start_offset = (2.0 * rng.uniform() - 1.0) * 0.2 * diag;
    const double cx = cfg.width / 2.0 + dx * start_offset;
    const double cy = cfg.height / 2.0 + dy * start_offset;
    const double v = speed * speed_jitter;
    const double trail_ms = 2.0; // OFF events lag the dot by this much path time

    EventStream s;
    s.width = cfg.width;
    s.height = cfg.height;
    s.duration_us = cfg.duration_us;

    auto position = [&](double t_ms) {
        const double px = detail::fold(cx + dx * v * t_ms, cfg.width - 1.0);
        const double py = detail::fold(cy + dy * v * t_ms, cfg.height - 1.0);
        return std::pair<double, double>(px, py);
    };
    // The dot is rendered as a plus-shaped blob so per-bin counts carry
    // enough charge to drive membranes past threshold after downsampling.
    auto push_blob = [&](double t_us, double px, double py, std::uint8_t pol) {
        const std::uint32_t t = static_cast<std::uint32_t>(std::min(t_us, double(cfg.duration_us) - 1.0));
        const int x0 = static_cast<int>(std::lround(px));
        const int y0 = static_cast<int>(std::lround(py));
        static constexpr int offs[5][2] = {{0, 0}, {1, 0}, {-1, 0}, {0, 1}, {0, -1}};
        for (const auto& o : offs) {
            const int x = x0 + o[0], y = y0 + o[1];
            if (x < 0 || x >= cfg.width || y < 0 || y >= cfg.height) continue;
            Event e;
            e.t = t;
            e.x = static_cast<std::uint16_t>(x);
            e.y = static_cast<std::uint16_t>(y);
            e.polarity = pol;
            s.events.push_back(e);
        }
    };

    for (double t_us = 0; t_us < cfg.duration_us; t_us += cfg.emit_interval_us) {
        const double t_ms = t_us / 1000.0;
        auto [px, py] = position(t_ms);
        push_blob(t_us, px, py, 1);
        auto [qx, qy] = position(t_ms - trail_ms);
        push_blob(t_us, qx, qy, 0);
    }

    const double pixels = double(cfg.width) * double(cfg.height);
    const double mean_noise = cfg.noise_rate * pixels * (cfg.duration_us / 100000.0);
    const int n_noise = rng.poisson(mean_noise);
    for (int i = 0; i < n_noise; ++i) {
        Event e;
        e.t = static_cast<std::uint32_t>(rng.below(cfg.duration_us));
        e.x = static_cast<std::uint16_t>(rng.below(cfg.width));
        e.y = static_cast<std::uint16_t>(rng.below(cfg.height));
        e.polarity = static_cast<std::uint8_t>(rng.below(2));
        s.events.push_back(e);
    }
    std::stable_sort(s.events.begin(), s.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    return s;
}

// ---- data sources ------------------------------------------------------------

// Produces the raw per-class streams that tasks are composed from.
class ClassStreamSource {
public:
    virtual ~ClassStreamSource() = default;
    virtual EventStream stream(int class_id, std::int64_t sample_idx) const = 0;
    virtual std::int64_t samples_per_class() const = 0;
};

class SyntheticSource final : public ClassStreamSource {
public:
    SyntheticSource(SynthConfig cfg, std::int64_t samples_per_class, std::uint64_t base_seed)
        : cfg_(cfg), samples_(samples_per_class), base_seed_(base_seed) {}

    EventStream stream(int class_id, std::int64_t sample_idx) const override {
        return synth_class(class_id, mix_seed(base_seed_, {0x5e7u, std::uint64_t(class_id),
                                                           std::uint64_t(sample_idx)}),
                           cfg_);
    }
    std::int64_t samples_per_class() const override { return samples_; }

    const SynthConfig& config() const { return cfg_; }

private:
    SynthConfig cfg_;
    std::int64_t samples_;
    std::uint64_t base_seed_;
};

// Reads class_<c>/sample_<k>.evs files below a directory.
class Evs1DirSource final : public ClassStreamSource {
public:
    explicit Evs1DirSource(std::string dir) : dir_(std::move(dir)) {
        namespace fs = std::filesystem;
        if (!fs::is_directory(dir_)) throw FormatError("dataset directory '" + dir_ + "' not found");
        samples_ = -1;
        for (const auto& entry : fs::directory_iterator(dir_)) {
            const std::string name = entry.path().filename().string();
            if (name.rfind("class_", 0) != 0) continue;
            std::int64_t count = 0;
            while (fs::exists(entry.path() / sample_name(count))) ++count;
            if (count == 0) throw FormatError("class directory '" + name + "' has no samples");
            samples_ = samples_ < 0 ? count : std::min(samples_, count);
        }
        if (samples_ < 0) throw FormatError("no class_<id> directories under '" + dir_ + "'");
    }

    EventStream stream(int class_id, std::int64_t sample_idx) const override {
        namespace fs = std::filesystem;
        const fs::path p = fs::path(dir_) / ("class_" + std::to_string(class_id)) / sample_name(sample_idx);
        return events::load_events(p.string());
    }
    std::int64_t samples_per_class() const override { return samples_; }

    static std::string sample_name(std::int64_t idx) { return "sample_" + std::to_string(idx) + ".evs"; }

private:
    std::string dir_;
    std::int64_t samples_ = 0;
};

// Stream-to-frames pipeline shared by every consumer of a task sample.
struct Pipeline {
    bool compose = true; // side-by-side task composition
    int down_x = 2;
    int down_y = 2;
    std::uint32_t crop_t0_us = 0;
    std::uint32_t crop_t1_us = 0; // 0 = no temporal crop
    double bin_ms = 1.0;
    bool binarize = false;
};

inline FrameSequence task_sample(const ClassStreamSource& source, const Pipeline& pipe,
                                 const TaskPair& task, std::int64_t sample_idx) {
    const std::int64_t M = source.samples_per_class();
    if (sample_idx < 0 || sample_idx >= M) throw StructuralError("task sample index out of range");
    EventStream s;
    if (pipe.compose) {
        const std::int64_t right = (sample_idx + M / 2) % M;
        s = events::compose_double(source.stream(task.a, sample_idx), source.stream(task.b, right));
    } else {
        s = source.stream(task.a, sample_idx);
    }
    if (pipe.down_x != 1 || pipe.down_y != 1) s = events::downsample_spatial(s, pipe.down_x, pipe.down_y);
    if (pipe.crop_t1_us > pipe.crop_t0_us) s = events::crop_temporal(s, pipe.crop_t0_us, pipe.crop_t1_us);
    return events::rasterize(s, pipe.bin_ms, pipe.binarize);
}

// One N-shot K-way problem instance. Labels are episode-local, 0..K-1 in the
// order the tasks were drawn.
struct Episode {
    struct Item {
        FrameSequence frames;
        std::int64_t label = 0;
    };
    std::vector<TaskPair> tasks;
    std::vector<Item> support;
    std::vector<Item> query;
};

inline Episode sample_episode(const std::vector<TaskPair>& part, const ClassStreamSource& source,
                              const Pipeline& pipe, int ways, int shots, int query_per_class,
                              std::uint64_t seed) {
    if (ways < 1 || shots < 0 || query_per_class < 0)
        throw StructuralError("sample_episode: invalid episode shape");
    if (static_cast<std::size_t>(ways) > part.size())
        throw StructuralError("sample_episode: requested " + std::to_string(ways) + " ways from " +
                              std::to_string(part.size()) + " tasks");
    const std::int64_t per_class = shots + query_per_class;
    if (per_class > source.samples_per_class())
        throw StructuralError("sample_episode: not enough samples per task");
    Rng rng(seed);
    Episode ep;
    const auto chosen = rng.sample_without_replacement(part.size(), static_cast<std::size_t>(ways));
    for (std::size_t c = 0; c < chosen.size(); ++c) {
        const TaskPair& task = part[chosen[c]];
        ep.tasks.push_back(task);
        const auto idxs = rng.sample_without_replacement(
            static_cast<std::size_t>(source.samples_per_class()), static_cast<std::size_t>(per_class));
        for (int k = 0; k < shots; ++k)
            ep.support.push_back({task_sample(source, pipe, task, static_cast<std::int64_t>(idxs[k])),
                                  static_cast<std::int64_t>(c)});
        for (int k = 0; k < query_per_class; ++k)
            ep.query.push_back(
                {task_sample(source, pipe, task, static_cast<std::int64_t>(idxs[shots + k])),
                 static_cast<std::int64_t>(c)});
    }
    return ep;
}

// Stacks items into per-timestep [B, 2, H, W] tensors plus the label vector.
template <typename S>
struct StepBatch {
    std::vector<Tensor<S>> frames;
    std::vector<std::int64_t> targets;
};

template <typename S>
StepBatch<S> to_step_batch(const std::vector<Episode::Item>& items) {
    if (items.empty()) throw StructuralError("empty batch");
    const auto& f0 = items[0].frames;
    const std::int64_t B = static_cast<std::int64_t>(items.size());
    StepBatch<S> out;
    out.frames.reserve(static_cast<std::size_t>(f0.steps));
    for (std::int64_t t = 0; t < f0.steps; ++t) {
        Tensor<S> frame({B, 2, f0.height, f0.width});
        for (std::int64_t b = 0; b < B; ++b) {
            const auto& f = items[static_cast<std::size_t>(b)].frames;
            if (f.steps != f0.steps || f.height != f0.height || f.width != f0.width)
                throw StructuralError("batch items have mismatched frame geometry");
            const float* src = f.counts.data() + t * f.frame_size();
            S* dst = frame.data() + b * f.frame_size();
            for (std::int64_t i = 0; i < f.frame_size(); ++i) dst[i] = static_cast<S>(src[i]);
        }
        out.frames.push_back(std::move(frame));
    }
    for (const auto& it : items) out.targets.push_back(it.label);
    return out;
}

}  // namespace metaspike::episodes
