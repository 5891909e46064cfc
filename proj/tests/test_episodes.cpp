#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "metaspike/episodes.hpp"

using namespace metaspike;
using namespace metaspike::episodes;

namespace {

std::vector<int> iota_classes(int n) {
    std::vector<int> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
    return v;
}

// Time- and polarity-summed frame, the representation used for the
// separability check.
std::vector<double> summed_frame(const FrameSequence& f) {
    std::vector<double> out(static_cast<std::size_t>(f.height * f.width), 0.0);
    for (std::int64_t t = 0; t < f.steps; ++t)
        for (std::int64_t p = 0; p < 2; ++p)
            for (std::int64_t y = 0; y < f.height; ++y)
                for (std::int64_t x = 0; x < f.width; ++x)
                    out[static_cast<std::size_t>(y * f.width + x)] += f.at(t, p, y, x);
    return out;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

}  // namespace

TEST_CASE("meta splits partition ordered class pairs") {
    SECTION("ten classes make one hundred tasks") {
        auto split = make_meta_splits(iota_classes(10), 64, 16, 20, 7);
        CHECK(split.train.size() == 64);
        CHECK(split.val.size() == 16);
        CHECK(split.test.size() == 20);
        std::set<std::pair<int, int>> all;
        for (const auto* part : {&split.train, &split.val, &split.test})
            for (const auto& t : *part) all.insert({t.a, t.b});
        CHECK(all.size() == 100); // disjoint and complete
    }

    SECTION("twenty-four classes make 576 tasks") {
        auto split = make_meta_splits(iota_classes(24), 369, 92, 115, 7);
        CHECK(split.train.size() == 369);
        CHECK(split.val.size() == 92);
        CHECK(split.test.size() == 115);
        std::set<std::pair<int, int>> all;
        for (const auto* part : {&split.train, &split.val, &split.test})
            for (const auto& t : *part) all.insert({t.a, t.b});
        CHECK(all.size() == 576);
    }

    SECTION("same seed reproduces the split; different seed changes it") {
        auto a = make_meta_splits(iota_classes(10), 64, 16, 20, 42);
        auto b = make_meta_splits(iota_classes(10), 64, 16, 20, 42);
        CHECK(a.train == b.train);
        CHECK(a.val == b.val);
        CHECK(a.test == b.test);
        auto c = make_meta_splits(iota_classes(10), 64, 16, 20, 43);
        CHECK(a.train != c.train);
    }

    SECTION("oversubscription rejected") {
        CHECK_THROWS_AS(make_meta_splits(iota_classes(3), 8, 1, 1, 1), StructuralError);
    }
}

TEST_CASE("split manifest round trip") {
    auto split = make_meta_splits(iota_classes(6), 20, 8, 8, 99);
    auto text = write_split_manifest(split);
    auto back = read_split_manifest(text);
    CHECK(back.seed == split.seed);
    CHECK(back.train == split.train);
    CHECK(back.val == split.val);
    CHECK(back.test == split.test);

    CHECK_THROWS_AS(read_split_manifest("train 1 2\n"), FormatError); // no header
    CHECK_THROWS_AS(read_split_manifest("# metaspike-split seed=1\nbogus 1 2\n"), FormatError);
}

TEST_CASE("synthetic class generator") {
    SynthConfig cfg;

    SECTION("deterministic per (class, seed)") {
        auto a = synth_class(3, 1234, cfg);
        auto b = synth_class(3, 1234, cfg);
        CHECK(a == b);
        auto c = synth_class(3, 1235, cfg);
        CHECK(a.events != c.events);
        auto d = synth_class(4, 1234, cfg);
        CHECK(a.events != d.events);
    }

    SECTION("streams are valid and non-trivial") {
        auto s = synth_class(7, 55, cfg);
        s.validate();
        CHECK(s.events.size() > 100);
        CHECK(s.width == cfg.width);
        CHECK(s.duration_us == cfg.duration_us);
    }

    SECTION("noiseless streams contain exactly the trajectory events") {
        SynthConfig quiet = cfg;
        quiet.noise_rate = 0.0;
        auto s = synth_class(2, 77, quiet);
        const auto ticks =
            static_cast<std::size_t>(std::ceil(double(quiet.duration_us) / quiet.emit_interval_us));
        // each tick emits a plus-shaped blob (up to 5 events) per polarity;
        // boundary clipping can only remove events
        CHECK(s.events.size() <= 10 * ticks);
        CHECK(s.events.size() >= 6 * ticks);
        // events cluster around a continuously moving dot: the ON centroid
        // never jumps across the field between consecutive ticks
        double px = -1, py = -1;
        for (std::size_t i = 0; i < s.events.size();) {
            const std::uint32_t t = s.events[i].t;
            double cx = 0, cy = 0;
            int n = 0;
            for (; i < s.events.size() && s.events[i].t == t; ++i) {
                if (s.events[i].polarity != 1) continue;
                cx += s.events[i].x;
                cy += s.events[i].y;
                ++n;
            }
            if (n == 0) continue;
            cx /= n;
            cy /= n;
            if (px >= 0) {
                CHECK(std::abs(cx - px) <= 4.0);
                CHECK(std::abs(cy - py) <= 4.0);
            }
            px = cx;
            py = cy;
        }
    }

    SECTION("preconditions") {
        SynthConfig small = cfg;
        small.width = 4;
        CHECK_THROWS_AS(synth_class(0, 1, small), StructuralError);
        SynthConfig brief = cfg;
        brief.duration_us = 10000;
        CHECK_THROWS_AS(synth_class(0, 1, brief), StructuralError);
    }

    SECTION("any five classes are nearest-centroid separable on summed frames") {
        // train 10 samples per class for centroids, evaluate 20 more each:
        // 100 evaluation samples across the 5 classes.
        SyntheticSource source(cfg, 30, 2024);
        const int classes[5] = {0, 1, 2, 3, 4};
        std::vector<std::vector<double>> centroids;
        for (int c : classes) {
            std::vector<double> acc;
            for (int k = 0; k < 10; ++k) {
                auto f = events::rasterize(source.stream(c, k), 1.0);
                auto v = summed_frame(f);
                if (acc.empty()) acc.assign(v.size(), 0.0);
                for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
            }
            for (auto& x : acc) x /= 10.0;
            centroids.push_back(std::move(acc));
        }
        int hits = 0, total = 0;
        for (int ci = 0; ci < 5; ++ci)
            for (int k = 10; k < 30; ++k) {
                auto v = summed_frame(events::rasterize(source.stream(classes[ci], k), 1.0));
                int best = 0;
                double bd = sq_dist(v, centroids[0]);
                for (int cj = 1; cj < 5; ++cj) {
                    const double d = sq_dist(v, centroids[static_cast<std::size_t>(cj)]);
                    if (d < bd) {
                        bd = d;
                        best = cj;
                    }
                }
                hits += best == ci;
                ++total;
            }
        CHECK(total == 100);
        CHECK(double(hits) / total > 0.9);
    }
}

TEST_CASE("episode sampling") {
    SynthConfig cfg;
    SyntheticSource source(cfg, 16, 11);
    Pipeline pipe; // compose, downsample 2, 1 ms bins
    auto split = make_meta_splits(iota_classes(10), 12, 4, 4, 5);

    SECTION("shapes of a 1-shot 5-way episode") {
        auto ep = sample_episode(split.train, source, pipe, 5, 1, 5, 31);
        CHECK(ep.tasks.size() == 5);
        CHECK(ep.support.size() == 5);
        CHECK(ep.query.size() == 25);
        CHECK(ep.support[0].frames.steps == 100);
        CHECK(ep.support[0].frames.height == 8);  // 16 composed then halved
        CHECK(ep.support[0].frames.width == 16);  // 32 composed then halved
        // labels are 0..K-1, shots of each
        std::set<std::int64_t> labels;
        for (const auto& it : ep.support) labels.insert(it.label);
        CHECK(labels.size() == 5);
    }

    SECTION("support and query never share a sample") {
        auto ep = sample_episode(split.train, source, pipe, 5, 2, 3, 77);
        for (const auto& s : ep.support)
            for (const auto& q : ep.query)
                if (s.label == q.label) CHECK(s.frames.counts != q.frames.counts);
    }

    SECTION("deterministic under seed") {
        auto a = sample_episode(split.val, source, pipe, 4, 1, 2, 123);
        auto b = sample_episode(split.val, source, pipe, 4, 1, 2, 123);
        CHECK(a.tasks.size() == b.tasks.size());
        for (std::size_t i = 0; i < a.tasks.size(); ++i) CHECK(a.tasks[i] == b.tasks[i]);
        for (std::size_t i = 0; i < a.support.size(); ++i)
            CHECK(a.support[i].frames.counts == b.support[i].frames.counts);
        auto c = sample_episode(split.val, source, pipe, 4, 1, 2, 124);
        bool same = true;
        for (std::size_t i = 0; i < a.tasks.size() && same; ++i) same = a.tasks[i] == c.tasks[i];
        CHECK_FALSE(same);
    }

    SECTION("more ways than tasks rejected") {
        CHECK_THROWS_AS(sample_episode(split.val, source, pipe, 5, 1, 1, 1), StructuralError);
    }

    SECTION("too many samples per class rejected") {
        CHECK_THROWS_AS(sample_episode(split.train, source, pipe, 5, 8, 9, 1), StructuralError);
    }

    SECTION("batch conversion stacks frames and labels") {
        auto ep = sample_episode(split.train, source, pipe, 3, 1, 2, 9);
        auto batch = to_step_batch<double>(ep.query);
        CHECK(batch.frames.size() == 100);
        CHECK(batch.frames[0].shape() == Shape{6, 2, 8, 16});
        CHECK(batch.targets.size() == 6);
        double total = 0;
        for (const auto& f : batch.frames)
            for (std::int64_t i = 0; i < f.size(); ++i) total += f[i];
        double expect = 0;
        for (const auto& it : ep.query) expect += it.frames.total();
        CHECK(total == expect);
    }
}
