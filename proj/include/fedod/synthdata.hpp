#pragma once

// Deterministic generator for the cabin/windshield corpus, the non-IID
// client partitioning, and the YOLO-format dataset directories.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fedod/box.hpp"
#include "fedod/error.hpp"
#include "fedod/params.hpp"
#include "fedod/sample.hpp"

namespace fedod::synthdata {

using Rgb = std::array<float, 3>;

inline Rgb body_rgb(BodyColor c) {
    switch (c) {
        case BodyColor::Blue: return {0.1f, 0.2f, 0.8f};
        case BodyColor::Red: return {0.8f, 0.15f, 0.1f};
        case BodyColor::White: return {0.92f, 0.92f, 0.9f};
    }
    return {0, 0, 0};
}

inline Rgb windshield_rgb(Windshield w) {
    switch (w) {
        case Windshield::A: return {0.9f, 0.9f, 0.3f};
        case Windshield::B: return {0.3f, 0.9f, 0.9f};
        case Windshield::C: return {0.9f, 0.5f, 0.9f};
        case Windshield::D: return {0.5f, 0.9f, 0.5f};
        case Windshield::None: break;
    }
    return {0, 0, 0};
}

inline const std::vector<Rgb>& training_backgrounds() {
    static const std::vector<Rgb> palette = {{0.5f, 0.5f, 0.5f}, {0.7f, 0.6f, 0.45f}, {0.25f, 0.3f, 0.3f}};
    return palette;
}

/// Backgrounds never used for training; the domain-shift set draws from these.
inline const std::vector<Rgb>& shifted_backgrounds() {
    static const std::vector<Rgb> palette = {{0.35f, 0.5f, 0.35f}, {0.55f, 0.5f, 0.7f}, {0.1f, 0.1f, 0.1f}};
    return palette;
}

struct SceneParams {
    BodyColor body_color = BodyColor::Blue;
    Windshield windshield = Windshield::None;
    int image_size = 32;
    std::vector<Rgb> backgrounds = training_backgrounds();
    double min_body_fraction = 0.3;
    double max_body_fraction = 0.6;
    double color_jitter = 0.05;
    double pixel_noise = 0.05;
    double brightness_lo = 0.7;
    double brightness_hi = 1.3;
    double blur_probability = 0.2;
};

inline int class_for(Windshield w) { return w == Windshield::None ? 0 : 1; }

namespace detail {

inline void box_blur3(Image& img) {
    const Image src = img;
    const int s = img.size;
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
            for (int c = 0; c < 3; ++c) {
                float sum = 0.0f;
                int n = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= s || xx < 0 || xx >= s) continue;
                        sum += src.at(yy, xx, c);
                        ++n;
                    }
                img.at(y, x, c) = sum / static_cast<float>(n);
            }
}

}  // namespace detail

/// Renders one scene. Draw order (fixed): background index, body width,
/// body height, body x, body y, 3 color jitters, per-pixel noise in raster
/// order (3 per pixel), brightness, blur coin.
inline Sample generate(const SceneParams& sp, Rng& rng) {
    const int s = sp.image_size;
    if (s < 4 || sp.backgrounds.empty() || !(sp.min_body_fraction > 0.0) ||
        !(sp.max_body_fraction <= 1.0) || sp.min_body_fraction > sp.max_body_fraction)
        throw Error(ErrorKind::SpecInvalid, "invalid scene parameters");

    Sample out;
    out.image = Image(s);
    out.meta.body_color = sp.body_color;
    out.meta.windshield = sp.windshield;
    out.meta.background_id = static_cast<int>(rng.below(sp.backgrounds.size()));

    const int lo = std::max(1, static_cast<int>(std::ceil(sp.min_body_fraction * s)));
    const int hi = std::max(lo, static_cast<int>(std::floor(sp.max_body_fraction * s)));
    const int pw = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
    const int ph = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
    const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(s - pw + 1)));
    const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(s - ph + 1)));

    Rgb body = body_rgb(sp.body_color);
    for (auto& ch : body) ch += static_cast<float>(rng.uniform(-sp.color_jitter, sp.color_jitter));

    const Rgb& bg = sp.backgrounds[out.meta.background_id];
    const Rgb shield = windshield_rgb(sp.windshield);
    // Windshield: inset one pixel at top/left/right, down to the body's top third.
    const int wy0 = y0 + 1, wy1 = y0 + std::max(2, static_cast<int>(std::lround(ph / 3.0)));
    const int wx0 = x0 + 1, wx1 = x0 + pw - 1;

    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const bool in_body = x >= x0 && x < x0 + pw && y >= y0 && y < y0 + ph;
            const bool in_shield =
                sp.windshield != Windshield::None && x >= wx0 && x < wx1 && y >= wy0 && y < wy1;
            const Rgb& base = in_shield ? shield : (in_body ? body : bg);
            for (int c = 0; c < 3; ++c)
                out.image.at(y, x, c) =
                    base[c] + static_cast<float>(rng.uniform(-sp.pixel_noise, sp.pixel_noise));
        }

    out.meta.brightness = rng.uniform(sp.brightness_lo, sp.brightness_hi);
    for (auto& v : out.image.pixels) v = std::clamp(v * static_cast<float>(out.meta.brightness), 0.0f, 1.0f);

    out.meta.blurred = rng.bernoulli(sp.blur_probability);
    if (out.meta.blurred) detail::box_blur3(out.image);

    const double inv = 1.0 / s;
    out.boxes.push_back(BBox{class_for(sp.windshield), (x0 + pw / 2.0) * inv, (y0 + ph / 2.0) * inv, pw * inv,
                             ph * inv});
    return out;
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

struct Combination {
    BodyColor body_color = BodyColor::Blue;
    Windshield windshield = Windshield::None;

    friend auto operator<=>(const Combination&, const Combination&) = default;
};

struct ClientSpec {
    std::string id;
    std::vector<Combination> allowed;
    int samples = 200;
};

struct PartitionSpec {
    std::vector<ClientSpec> clients;
    double train_fraction = 0.70;
    double val_fraction = 0.15;
    double test_fraction = 0.15;
    int cross_test_samples = 60;
    int domain_shift_samples = 60;
    /// Empty: every (color x windshield) pairing absent from all clients.
    std::vector<Combination> cross_combinations;
    std::uint64_t seed = 1;
    int image_size = 32;
};

struct ClientData {
    std::string id;
    std::vector<Sample> train, val, test;
};

struct Partitions {
    std::vector<ClientData> clients;
    std::vector<Sample> cross_test;
    std::vector<Sample> domain_shift;
    std::vector<Combination> cross_combinations;
    /// Set when no unseen combination exists (clients fully overlap).
    bool cross_test_empty = false;
};

/// Floor each n*f_i, then hand the remainder out by descending fractional
/// part (ties: earlier split first).
inline std::array<int, 3> split_sizes(int n, const std::array<double, 3>& fractions) {
    std::array<int, 3> sizes{};
    std::array<double, 3> frac{};
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = n * fractions[i];
        sizes[i] = static_cast<int>(std::floor(exact + 1e-9));
        frac[i] = exact - sizes[i];
        assigned += sizes[i];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
    for (int k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k % 3]];
    return sizes;
}

inline std::set<Combination> combination_universe(const PartitionSpec& spec) {
    std::set<BodyColor> colors;
    std::set<Windshield> shields;
    for (const auto& c : spec.clients)
        for (const auto& combo : c.allowed) {
            colors.insert(combo.body_color);
            shields.insert(combo.windshield);
        }
    std::set<Combination> all;
    for (auto c : colors)
        for (auto w : shields) all.insert({c, w});
    return all;
}

inline void validate(const PartitionSpec& spec) {
    auto fail = [](const std::string& m) { throw Error(ErrorKind::SpecInvalid, m); };
    if (spec.clients.empty()) fail("no clients");
    const double sum = spec.train_fraction + spec.val_fraction + spec.test_fraction;
    if (std::abs(sum - 1.0) > 1e-9 || spec.train_fraction < 0 || spec.val_fraction < 0 || spec.test_fraction < 0)
        fail("split fractions must be non-negative and sum to 1");
    std::set<std::string> ids;
    for (const auto& c : spec.clients) {
        if (c.id.empty()) fail("client id must be non-empty");
        if (!ids.insert(c.id).second) fail("duplicate client id '" + c.id + "'");
        if (c.allowed.empty()) fail("client '" + c.id + "' has an empty combination set");
        if (c.samples < 1) fail("client '" + c.id + "' needs at least one sample");
    }
    if (spec.cross_test_samples < 0 || spec.domain_shift_samples < 0) fail("negative set size");
    if (spec.image_size < 4) fail("image_size too small");
    for (const auto& combo : spec.cross_combinations)
        for (const auto& c : spec.clients)
            for (const auto& a : c.allowed)
                if (a == combo)
                    fail("cross combination " + std::string(to_string(combo.body_color)) + "x" +
                         std::string(to_string(combo.windshield)) + " appears in client '" + c.id + "'");
}

/// Pairings of `client`'s body colors with windshields it never trained on,
/// restricted to the cross set (the per-client "swapped" test).
inline std::vector<Sample> swap_subset(const std::vector<Sample>& cross_test, const ClientSpec& client) {
    std::set<BodyColor> colors;
    for (const auto& a : client.allowed) colors.insert(a.body_color);
    std::vector<Sample> out;
    for (const auto& s : cross_test)
        if (colors.count(s.meta.body_color)) out.push_back(s);
    return out;
}

namespace detail {

// Stream ids keep every set's per-sample seeds disjoint.
inline std::uint64_t stream_id(std::uint64_t set, std::uint64_t index) { return (set << 32) | index; }

inline std::vector<Sample> render_set(const std::vector<Combination>& combos, int count, std::uint64_t seed,
                                      std::uint64_t set, SceneParams base) {
    std::vector<Sample> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        const auto& combo = combos[static_cast<std::size_t>(i) % combos.size()];
        base.body_color = combo.body_color;
        base.windshield = combo.windshield;
        Rng rng(derive_seed(seed, stream_id(set, static_cast<std::uint64_t>(i))));
        out.push_back(generate(base, rng));
    }
    return out;
}

}  // namespace detail

inline Partitions build_partitions(const PartitionSpec& spec) {
    validate(spec);
    Partitions out;

    SceneParams scene;
    scene.image_size = spec.image_size;

    for (std::size_t k = 0; k < spec.clients.size(); ++k) {
        const auto& cs = spec.clients[k];
        auto all = detail::render_set(cs.allowed, cs.samples, spec.seed, 1 + k, scene);
        Rng order_rng(derive_seed(spec.seed, detail::stream_id(0xFFFF, k)));
        order_rng.shuffle(all);
        const auto sizes = split_sizes(cs.samples, {spec.train_fraction, spec.val_fraction, spec.test_fraction});
        ClientData cd;
        cd.id = cs.id;
        auto it = std::make_move_iterator(all.begin());
        cd.train.assign(it, it + sizes[0]);
        cd.val.assign(it + sizes[0], it + sizes[0] + sizes[1]);
        cd.test.assign(it + sizes[0] + sizes[1], it + cs.samples);
        out.clients.push_back(std::move(cd));
    }

    const auto universe = combination_universe(spec);
    if (!spec.cross_combinations.empty()) {
        out.cross_combinations = spec.cross_combinations;
    } else {
        std::set<Combination> seen;
        for (const auto& c : spec.clients) seen.insert(c.allowed.begin(), c.allowed.end());
        for (const auto& combo : universe)
            if (!seen.count(combo)) out.cross_combinations.push_back(combo);
    }
    out.cross_test_empty = out.cross_combinations.empty();
    if (!out.cross_test_empty)
        out.cross_test = detail::render_set(out.cross_combinations, spec.cross_test_samples, spec.seed, 0x1000, scene);

    SceneParams shifted = scene;
    shifted.backgrounds = shifted_backgrounds();
    shifted.brightness_lo = 0.4;
    shifted.brightness_hi = 1.6;
    const std::vector<Combination> all_combos(universe.begin(), universe.end());
    out.domain_shift = detail::render_set(all_combos, spec.domain_shift_samples, spec.seed, 0x2000, shifted);
    return out;
}

// ---------------------------------------------------------------------------
// YOLO directory I/O
// ---------------------------------------------------------------------------

inline std::string format_label(const BBox& b) {
    char line[128];
    std::snprintf(line, sizeof line, "%d %.6f %.6f %.6f %.6f", b.class_id, b.cx, b.cy, b.w, b.h);
    return line;
}

inline BBox parse_label(const std::string& line) {
    std::istringstream in(line);
    std::vector<std::string> fields{std::istream_iterator<std::string>(in), std::istream_iterator<std::string>()};
    if (fields.size() != 5)
        throw Error(ErrorKind::MalformedLabelLine,
                    "expected 5 fields, got " + std::to_string(fields.size()) + ": '" + line + "'");
    BBox b;
    try {
        std::size_t used = 0;
        b.class_id = std::stoi(fields[0], &used);
        if (used != fields[0].size()) throw std::invalid_argument("class");
        double* coords[4] = {&b.cx, &b.cy, &b.w, &b.h};
        for (int i = 0; i < 4; ++i) {
            *coords[i] = std::stod(fields[1 + i], &used);
            if (used != fields[1 + i].size()) throw std::invalid_argument("coord");
        }
    } catch (const std::logic_error&) {
        throw Error(ErrorKind::MalformedLabelLine, "unparsable field in '" + line + "'");
    }
    if (b.class_id < 0 || !(b.cx >= 0.0 && b.cx <= 1.0) || !(b.cy >= 0.0 && b.cy <= 1.0) ||
        !(b.w > 0.0 && b.w <= 1.0) || !(b.h > 0.0 && b.h <= 1.0))
        throw Error(ErrorKind::MalformedLabelLine, "value out of range in '" + line + "'");
    return b;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
    out << "P6\n" << img.size << ' ' << img.size << "\n255\n";
    std::string bytes(img.pixels.size(), '\0');
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        bytes[i] = static_cast<char>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::IoFailure, "short write to " + path.string());
}

inline Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::IoFailure, "cannot read " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || w <= 0 || w != h || maxval != 255)
        throw Error(ErrorKind::IoFailure, path.string() + " is not a square 8-bit P6 image");
    in.get();
    Image img(w);
    std::string bytes(img.pixels.size(), '\0');
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw Error(ErrorKind::IoFailure, path.string() + " is truncated");
    for (std::size_t i = 0; i < bytes.size(); ++i)
        img.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[i])) / 255.0f;
    return img;
}

inline std::string sample_stem(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%05zu", index);
    return buf;
}

inline nlohmann::json meta_to_json(const SceneMeta& m) {
    return {{"body_color", to_string(m.body_color)},
            {"windshield", to_string(m.windshield)},
            {"background_id", m.background_id},
            {"brightness", m.brightness},
            {"blurred", m.blurred}};
}

inline SceneMeta meta_from_json(const nlohmann::json& j) {
    SceneMeta m;
    const auto color = j.at("body_color").get<std::string>();
    if (color == "blue") m.body_color = BodyColor::Blue;
    else if (color == "red") m.body_color = BodyColor::Red;
    else if (color == "white") m.body_color = BodyColor::White;
    else throw Error(ErrorKind::IoFailure, "unknown body_color '" + color + "'");
    const auto ws = j.at("windshield").get<std::string>();
    if (ws == "none") m.windshield = Windshield::None;
    else if (ws == "A") m.windshield = Windshield::A;
    else if (ws == "B") m.windshield = Windshield::B;
    else if (ws == "C") m.windshield = Windshield::C;
    else if (ws == "D") m.windshield = Windshield::D;
    else throw Error(ErrorKind::IoFailure, "unknown windshield '" + ws + "'");
    m.background_id = j.at("background_id").get<int>();
    m.brightness = j.at("brightness").get<double>();
    m.blurred = j.at("blurred").get<bool>();
    return m;
}

/// Writes images/NNNNN.ppm, labels/NNNNN.txt and manifest.json. `extra`
/// is merged into the manifest (split name, spec echo, seed).
inline void write_yolo(const std::filesystem::path& dir, const std::vector<Sample>& samples,
                       const nlohmann::json& extra = nlohmann::json::object()) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    fs::create_directories(dir / "labels", ec);
    if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + dir.string() + ": " + ec.message());

    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto stem = sample_stem(i);
        write_ppm(dir / "images" / (stem + ".ppm"), samples[i].image);
        std::ofstream lab(dir / "labels" / (stem + ".txt"), std::ios::trunc);
        if (!lab) throw Error(ErrorKind::IoFailure, "cannot write label for " + stem);
        for (const auto& b : samples[i].boxes) lab << format_label(b) << '\n';
        auto e = meta_to_json(samples[i].meta);
        e["file"] = stem;
        entries.push_back(std::move(e));
    }
    nlohmann::json manifest = extra;
    manifest["count"] = samples.size();
    manifest["samples"] = std::move(entries);
    std::ofstream m(dir / "manifest.json", std::ios::trunc);
    if (!m) throw Error(ErrorKind::IoFailure, "cannot write manifest in " + dir.string());
    m << manifest.dump(2) << '\n';
}

/// Reads every labels/*.txt with its matching image, in file-name order.
/// Scene metadata comes from manifest.json when present.
inline std::vector<Sample> read_yolo(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir / "labels") || !fs::is_directory(dir / "images"))
        throw Error(ErrorKind::IoFailure, dir.string() + " has no images/ and labels/ directories");

    std::vector<fs::path> labels;
    for (const auto& e : fs::directory_iterator(dir / "labels"))
        if (e.path().extension() == ".txt") labels.push_back(e.path());
    std::sort(labels.begin(), labels.end());

    std::vector<SceneMeta> metas;
    if (fs::exists(dir / "manifest.json")) {
        std::ifstream m(dir / "manifest.json");
        try {
            const auto manifest = nlohmann::json::parse(m);
            for (const auto& e : manifest.at("samples")) metas.push_back(meta_from_json(e));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::IoFailure, "bad manifest in " + dir.string() + ": " + e.what());
        }
        if (metas.size() != labels.size())
            throw Error(ErrorKind::IoFailure, "manifest count does not match label files in " + dir.string());
    }

    std::vector<Sample> out;
    out.reserve(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        Sample s;
        const auto stem = labels[i].stem().string();
        s.image = read_ppm(dir / "images" / (stem + ".ppm"));
        std::ifstream lab(labels[i]);
        std::string line;
        while (std::getline(lab, line)) {
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            s.boxes.push_back(parse_label(line));
        }
        if (!metas.empty()) s.meta = metas[i];
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace fedod::synthdata
