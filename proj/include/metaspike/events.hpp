#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "metaspike/errors.hpp"

// DVS event streams and their transforms, plus the EVS1 binary container.
//
// EVS1 layout, little-endian throughout:
//   header (16 bytes): magic "EVS1", width u16, height u16, duration_us u32,
//                      event count u32
//   records (9 bytes): t u32 (microseconds), x u16, y u16, polarity u8

namespace metaspike::events {

struct Event {
    std::uint32_t t = 0; // microseconds
    std::uint16_t x = 0; // column
    std::uint16_t y = 0; // row
    std::uint8_t polarity = 0;

    bool operator==(const Event&) const = default;
};

struct EventStream {
    std::uint16_t width = 0;
    std::uint16_t height = 0;
    std::uint32_t duration_us = 0;
    std::vector<Event> events; // non-decreasing in t, all t < duration_us

    bool operator==(const EventStream&) const = default;

    void validate() const {
        std::uint32_t prev = 0;
        for (std::size_t i = 0; i < events.size(); ++i) {
            const Event& e = events[i];
            if (e.polarity > 1) throw StructuralError("event polarity must be 0 or 1");
            if (e.x >= width || e.y >= height)
                throw StructuralError("event at (" + std::to_string(e.x) + "," + std::to_string(e.y) +
                                      ") outside " + std::to_string(width) + "x" + std::to_string(height));
            if (e.t < prev) throw StructuralError("events not sorted by timestamp");
            if (e.t >= duration_us) throw StructuralError("event timestamp beyond stream duration");
            prev = e.t;
        }
    }
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const unsigned char* p;
    std::size_t n;
    std::size_t pos = 0;

    void need(std::size_t k, const char* what) const {
        if (pos + k > n) throw FormatError(std::string("truncated ") + what, static_cast<std::int64_t>(pos));
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return p[pos++];
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(p[pos] | (p[pos + 1] << 8));
        pos += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
};

}  // namespace detail

inline std::string write_events(const EventStream& s) {
    s.validate();
    std::string out;
    out.reserve(16 + 9 * s.events.size());
    out += "EVS1";
    detail::put_u16(out, s.width);
    detail::put_u16(out, s.height);
    detail::put_u32(out, s.duration_us);
    detail::put_u32(out, static_cast<std::uint32_t>(s.events.size()));
    for (const Event& e : s.events) {
        detail::put_u32(out, e.t);
        detail::put_u16(out, e.x);
        detail::put_u16(out, e.y);
        out.push_back(static_cast<char>(e.polarity));
    }
    return out;
}

inline EventStream read_events(const std::string& bytes) {
    detail::Reader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()};
    r.need(4, "header");
    if (std::memcmp(bytes.data(), "EVS1", 4) != 0) throw FormatError("bad magic, expected EVS1", 0);
    r.pos = 4;
    EventStream s;
    s.width = r.u16("header");
    s.height = r.u16("header");
    s.duration_us = r.u32("header");
    const std::uint32_t count = r.u32("header");
    s.events.reserve(count);
    std::uint32_t prev = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t rec_off = r.pos;
        Event e;
        e.t = r.u32("event record");
        e.x = r.u16("event record");
        e.y = r.u16("event record");
        e.polarity = r.u8("event record");
        if (e.polarity > 1)
            throw FormatError("polarity " + std::to_string(e.polarity) + " outside {0,1}",
                              static_cast<std::int64_t>(rec_off + 8));
        if (e.x >= s.width || e.y >= s.height)
            throw FormatError("event coordinates outside sensor geometry",
                              static_cast<std::int64_t>(rec_off + 4));
        if (e.t < prev)
            throw FormatError("timestamps not sorted", static_cast<std::int64_t>(rec_off));
        if (e.t >= s.duration_us)
            throw FormatError("timestamp beyond stream duration", static_cast<std::int64_t>(rec_off));
        prev = e.t;
        s.events.push_back(e);
    }
    if (r.pos != bytes.size())
        throw FormatError("trailing bytes after last event record", static_cast<std::int64_t>(r.pos));
    return s;
}

inline void save_events(const EventStream& s, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + path + "' for writing");
    const std::string bytes = write_events(s);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("write failed for '" + path + "'");
}

inline EventStream load_events(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return read_events(bytes);
}

// Side-by-side composition: b is placed to the right of a. Equal timestamps
// keep a's events first (stable merge).
inline EventStream compose_double(const EventStream& a, const EventStream& b) {
    if (a.height != b.height) throw StructuralError("compose_double: height mismatch");
    if (a.duration_us != b.duration_us) throw StructuralError("compose_double: duration mismatch");
    if (static_cast<std::uint32_t>(a.width) + b.width > 0xffff)
        throw StructuralError("compose_double: combined width overflows");
    EventStream out;
    out.width = static_cast<std::uint16_t>(a.width + b.width);
    out.height = a.height;
    out.duration_us = a.duration_us;
    out.events.reserve(a.events.size() + b.events.size());
    std::size_t i = 0, j = 0;
    while (i < a.events.size() || j < b.events.size()) {
        const bool take_a =
            j >= b.events.size() || (i < a.events.size() && a.events[i].t <= b.events[j].t);
        if (take_a) {
            out.events.push_back(a.events[i++]);
        } else {
            Event e = b.events[j++];
            e.x = static_cast<std::uint16_t>(e.x + a.width);
            out.events.push_back(e);
        }
    }
    return out;
}

// Floor-divide coordinates; factors may differ per axis. Events are
// preserved, several may land on the same pixel.
inline EventStream downsample_spatial(const EventStream& s, int factor_x, int factor_y) {
    if (factor_x < 1 || factor_y < 1) throw StructuralError("downsample factor must be >= 1");
    if (factor_x == 1 && factor_y == 1) return s;
    EventStream out;
    out.width = static_cast<std::uint16_t>((s.width + factor_x - 1) / factor_x);
    out.height = static_cast<std::uint16_t>((s.height + factor_y - 1) / factor_y);
    out.duration_us = s.duration_us;
    out.events = s.events;
    for (Event& e : out.events) {
        e.x = static_cast<std::uint16_t>(e.x / factor_x);
        e.y = static_cast<std::uint16_t>(e.y / factor_y);
    }
    return out;
}

inline EventStream downsample_spatial(const EventStream& s, int factor) {
    return downsample_spatial(s, factor, factor);
}

// Keep events with t0 <= t < t1, re-based to t0.
inline EventStream crop_temporal(const EventStream& s, std::uint32_t t0_us, std::uint32_t t1_us) {
    if (!(t0_us < t1_us) || t1_us > s.duration_us)
        throw StructuralError("crop_temporal: invalid window [" + std::to_string(t0_us) + "," +
                              std::to_string(t1_us) + ") for duration " + std::to_string(s.duration_us));
    EventStream out;
    out.width = s.width;
    out.height = s.height;
    out.duration_us = t1_us - t0_us;
    for (const Event& e : s.events) {
        if (e.t < t0_us) continue;
        if (e.t >= t1_us) break;
        Event c = e;
        c.t -= t0_us;
        out.events.push_back(c);
    }
    return out;
}

// Per-bin event counts, [T, 2, H, W] row-major, stored as float.
struct FrameSequence {
    std::int64_t steps = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;
    double bin_ms = 1.0;
    std::vector<float> counts; // steps * 2 * height * width

    std::int64_t frame_size() const { return 2 * height * width; }
    float& at(std::int64_t t, std::int64_t p, std::int64_t y, std::int64_t x) {
        return counts[((t * 2 + p) * height + y) * width + x];
    }
    float at(std::int64_t t, std::int64_t p, std::int64_t y, std::int64_t x) const {
        return counts[((t * 2 + p) * height + y) * width + x];
    }
    double total() const {
        double s = 0;
        for (float c : counts) s += c;
        return s;
    }
};

inline FrameSequence rasterize(const EventStream& s, double bin_ms, bool binarize = false) {
    if (!(bin_ms > 0)) throw StructuralError("rasterize: bin width must be > 0");
    FrameSequence fs;
    fs.height = s.height;
    fs.width = s.width;
    fs.bin_ms = bin_ms;
    const double bin_us = bin_ms * 1000.0;
    fs.steps = static_cast<std::int64_t>((s.duration_us + bin_us - 1) / bin_us);
    if (fs.steps <= 0) fs.steps = 1;
    fs.counts.assign(static_cast<std::size_t>(fs.steps * fs.frame_size()), 0.0f);
    for (const Event& e : s.events) {
        std::int64_t k = static_cast<std::int64_t>(e.t / bin_us);
        if (k >= fs.steps) k = fs.steps - 1;
        float& cell = fs.at(k, e.polarity, e.y, e.x);
        cell = binarize ? 1.0f : cell + 1.0f;
    }
    return fs;
}

}  // namespace metaspike::events
