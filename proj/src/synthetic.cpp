#include "tinyvlm/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace tinyvlm {

namespace grammar {
std::string cell_name(int row, int col) {
    return std::string(kRowNames[static_cast<std::size_t>(row)]) + " " +
           kColNames[static_cast<std::size_t>(col)];
}
}  // namespace grammar

namespace {

// 8-bit channel values so a PPM round-trip reproduces pixels exactly
struct Rgb {
    unsigned char r, g, b;
};

constexpr Rgb kBackground = {26, 26, 26};
constexpr Rgb kColorValues[8] = {
    {220, 40, 40},    // red
    {50, 90, 220},    // blue
    {40, 170, 60},    // green
    {230, 210, 50},   // yellow
    {150, 60, 190},   // purple
    {240, 130, 190},  // pink
    {140, 90, 40},    // brown
    {128, 128, 128},  // gray
};

constexpr int kImageSize = 32;
constexpr int kCellPix = 8;

bool inside_shape(int shape, int y, int x) {
    // local coordinates 0..7 within the cell
    const double cy = 3.5, cx = 3.5;
    switch (shape) {
        case 0:  // circle
            return (y - cy) * (y - cy) + (x - cx) * (x - cx) <= 3.2 * 3.2;
        case 1:  // square
            return y >= 1 && y <= 6 && x >= 1 && x <= 6;
        case 2:  // triangle: widens toward the bottom
            return y >= 1 && y <= 6 && std::abs(x - 3.5) <= 0.55 * (y - 0.5);
        default:
            return false;
    }
}

std::string count_phrase(int n) {
    std::string s = grammar::kCountWords[static_cast<std::size_t>(n - 1)];
    return s + (n == 1 ? " object" : " objects");
}

std::string object_phrase(const SceneObject& o) {
    return std::string(grammar::kColors[static_cast<std::size_t>(o.color)]) +
           " " + grammar::kShapes[static_cast<std::size_t>(o.shape)];
}

std::string capitalize(std::string w) {
    if (!w.empty() && w[0] >= 'a' && w[0] <= 'z')
        w[0] = static_cast<char>(w[0] - 'a' + 'A');
    return w;
}

}  // namespace

SceneSpec generate_scene(std::uint64_t seed) {
    Rng rng(seed ^ 0x5ce0e9a56015fec5ull);
    SceneSpec scene;
    scene.seed = seed;
    const int count = 1 + static_cast<int>(rng.below(grammar::kMaxObjects));
    // collision-free cells via a partial shuffle of all 16 cells
    std::vector<int> cells(grammar::kGridSize * grammar::kGridSize);
    for (std::size_t i = 0; i < cells.size(); ++i)
        cells[i] = static_cast<int>(i);
    for (int i = 0; i < count; ++i) {
        const int j =
            i + static_cast<int>(rng.below(cells.size() - static_cast<std::size_t>(i)));
        std::swap(cells[static_cast<std::size_t>(i)],
                  cells[static_cast<std::size_t>(j)]);
    }
    for (int i = 0; i < count; ++i) {
        SceneObject o;
        o.shape = static_cast<int>(rng.below(grammar::kShapes.size()));
        o.color = static_cast<int>(rng.below(grammar::kColors.size()));
        o.row = cells[static_cast<std::size_t>(i)] / grammar::kGridSize;
        o.col = cells[static_cast<std::size_t>(i)] % grammar::kGridSize;
        scene.objects.push_back(o);
    }
    // reading order keeps captions and manifests canonical
    std::sort(scene.objects.begin(), scene.objects.end(),
              [](const SceneObject& a, const SceneObject& b) {
                  return std::tie(a.row, a.col) < std::tie(b.row, b.col);
              });
    return scene;
}

ImageSample render(const SceneSpec& scene) {
    std::vector<unsigned char> img(kImageSize * kImageSize * 3);
    for (int i = 0; i < kImageSize * kImageSize; ++i) {
        img[static_cast<std::size_t>(i) * 3 + 0] = kBackground.r;
        img[static_cast<std::size_t>(i) * 3 + 1] = kBackground.g;
        img[static_cast<std::size_t>(i) * 3 + 2] = kBackground.b;
    }
    for (const auto& o : scene.objects) {
        const Rgb c = kColorValues[o.color];
        for (int y = 0; y < kCellPix; ++y) {
            for (int x = 0; x < kCellPix; ++x) {
                if (!inside_shape(o.shape, y, x)) continue;
                const int py = o.row * kCellPix + y;
                const int px = o.col * kCellPix + x;
                const std::size_t idx =
                    (static_cast<std::size_t>(py) * kImageSize + px) * 3;
                img[idx + 0] = c.r;
                img[idx + 1] = c.g;
                img[idx + 2] = c.b;
            }
        }
    }
    auto pixels = make_tensor({kImageSize, kImageSize, 3});
    for (std::size_t i = 0; i < img.size(); ++i)
        pixels->data[i] = img[i] / 255.0;
    return {scene, pixels};
}

CaptionPair caption_short(const SceneSpec& scene, double p_noise,
                          std::uint64_t seed) {
    if (p_noise < 0.0 || p_noise > 1.0)
        throw InvalidRequestError("p_noise must lie in [0,1]");
    Rng rng(seed ^ 0x94d049bb133111ebull);
    const auto& target =
        scene.objects[rng.below(scene.objects.size())];
    int shape = target.shape, color = target.color;
    if (rng.uniform() < p_noise) {
        std::set<std::pair<int, int>> truth;
        for (const auto& o : scene.objects) truth.insert({o.shape, o.color});
        // corrupt until the mentioned pair is not in the scene at all
        do {
            if (rng.below(2) == 0)
                color = static_cast<int>(rng.below(grammar::kColors.size()));
            else
                shape = static_cast<int>(rng.below(grammar::kShapes.size()));
        } while (truth.count({shape, color}) > 0);
    }
    CaptionPair cap;
    cap.kind = "short_noisy";
    cap.text = "a " +
               std::string(grammar::kColors[static_cast<std::size_t>(color)]) +
               " " + grammar::kShapes[static_cast<std::size_t>(shape)];
    cap.ground_truth = scene.objects;
    return cap;
}

CaptionPair caption_detailed(const SceneSpec& scene) {
    // three sentence forms cycled by position so no 4-gram repeats three
    // times even in a six-object scene
    std::string text;
    int i = 0;
    for (const auto& o : scene.objects) {
        const std::string pos = grammar::cell_name(o.row, o.col);
        const std::string obj = object_phrase(o);
        switch (i % 3) {
            case 0:
                text += "In the " + pos + ", there is a " + obj + ". ";
                break;
            case 1:
                text += capitalize(obj) + " sits in the " + pos + ". ";
                break;
            case 2:
                text += "You can see a " + obj + " in the " + pos + ". ";
                break;
        }
        ++i;
    }
    text += "The image contains " +
            count_phrase(static_cast<int>(scene.objects.size())) + ".";
    CaptionPair cap;
    cap.kind = "detailed";
    cap.text = text;
    cap.ground_truth = scene.objects;
    return cap;
}

std::vector<SceneObject> parse_caption_objects(const std::string& text) {
    std::vector<SceneObject> out;
    // split into sentences, then pattern-match color/shape/row/col words
    std::vector<std::string> words;
    std::istringstream is(text);
    std::string w;
    auto strip = [](std::string s) {
        while (!s.empty() && (s.back() == '.' || s.back() == ',')) s.pop_back();
        std::transform(s.begin(), s.end(), s.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        return s;
    };
    std::vector<std::string> sentence;
    auto flush = [&](std::vector<std::string>& sent) {
        SceneObject o{-1, -1, -1, -1};
        for (const auto& word : sent) {
            for (std::size_t i = 0; i < grammar::kShapes.size(); ++i)
                if (word == grammar::kShapes[i]) o.shape = static_cast<int>(i);
            for (std::size_t i = 0; i < grammar::kColors.size(); ++i)
                if (word == grammar::kColors[i]) o.color = static_cast<int>(i);
            for (std::size_t i = 0; i < grammar::kRowNames.size(); ++i)
                if (word == grammar::kRowNames[i]) o.row = static_cast<int>(i);
            for (std::size_t i = 0; i < grammar::kColNames.size(); ++i)
                if (word == grammar::kColNames[i]) o.col = static_cast<int>(i);
        }
        if (o.shape >= 0 && o.color >= 0 && o.row >= 0 && o.col >= 0)
            out.push_back(o);
        sent.clear();
    };
    while (is >> w) {
        const bool ends = !w.empty() && w.back() == '.';
        sentence.push_back(strip(w));
        if (ends) flush(sentence);
    }
    if (!sentence.empty()) flush(sentence);
    return out;
}

void write_ppm(const std::string& path, const TensorPtr& pixels) {
    if (pixels->shape != std::vector<int>{kImageSize, kImageSize, 3})
        throw DimensionError("write_ppm: expected [32,32,3], got " +
                             pixels->shape_str());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write image: " + path);
    f << "P6\n" << kImageSize << " " << kImageSize << "\n255\n";
    for (double v : pixels->data) {
        const int byte = static_cast<int>(std::lround(v * 255.0));
        f.put(static_cast<char>(std::clamp(byte, 0, 255)));
    }
    if (!f) throw std::runtime_error("image write failed: " + path);
}

TensorPtr read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read image: " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P6" || w != kImageSize || h != kImageSize || maxval != 255)
        throw std::runtime_error("unsupported PPM file: " + path);
    f.get();
    auto pixels = make_tensor({kImageSize, kImageSize, 3});
    for (double& v : pixels->data) {
        const int c = f.get();
        if (c < 0) throw std::runtime_error("truncated PPM file: " + path);
        v = c / 255.0;
    }
    return pixels;
}

std::string format_ground_truth(const std::vector<SceneObject>& objs) {
    std::vector<std::string> parts;
    for (const auto& o : objs) {
        parts.push_back(
            std::string(grammar::kColors[static_cast<std::size_t>(o.color)]) +
            "/" + grammar::kShapes[static_cast<std::size_t>(o.shape)] + "@" +
            std::to_string(o.row) + "," + std::to_string(o.col));
    }
    std::sort(parts.begin(), parts.end());
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += ";";
        out += parts[i];
    }
    return out;
}

std::vector<SceneObject> parse_ground_truth(const std::string& field) {
    std::vector<SceneObject> out;
    std::istringstream is(field);
    std::string item;
    while (std::getline(is, item, ';')) {
        const auto slash = item.find('/');
        const auto at = item.find('@');
        const auto comma = item.find(',', at);
        if (slash == std::string::npos || at == std::string::npos ||
            comma == std::string::npos)
            throw std::runtime_error("bad ground-truth field: " + field);
        SceneObject o{-1, -1, -1, -1};
        const std::string color = item.substr(0, slash);
        const std::string shape = item.substr(slash + 1, at - slash - 1);
        for (std::size_t i = 0; i < grammar::kColors.size(); ++i)
            if (color == grammar::kColors[i]) o.color = static_cast<int>(i);
        for (std::size_t i = 0; i < grammar::kShapes.size(); ++i)
            if (shape == grammar::kShapes[i]) o.shape = static_cast<int>(i);
        o.row = std::stoi(item.substr(at + 1, comma - at - 1));
        o.col = std::stoi(item.substr(comma + 1));
        if (o.color < 0 || o.shape < 0)
            throw std::runtime_error("bad ground-truth field: " + field);
        out.push_back(o);
    }
    // canonical struct order, independent of the string sort used on disk
    std::sort(out.begin(), out.end());
    return out;
}

void write_manifest(const std::string& path,
                    const std::vector<ManifestRecord>& records) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write manifest: " + path);
    for (const auto& r : records) {
        f << r.image_id << "\t" << r.image_path << "\t" << r.kind << "\t"
          << r.text << "\t" << format_ground_truth(r.ground_truth) << "\n";
    }
    if (!f) throw std::runtime_error("manifest write failed: " + path);
}

std::vector<ManifestRecord> read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read manifest: " + path);
    std::vector<ManifestRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::istringstream is(line);
        std::string field;
        while (std::getline(is, field, '\t')) fields.push_back(field);
        if (fields.size() != 5)
            throw std::runtime_error("bad manifest line in " + path + ": " +
                                     line);
        ManifestRecord r;
        r.image_id = fields[0];
        r.image_path = fields[1];
        r.kind = fields[2];
        r.text = fields[3];
        r.ground_truth = parse_ground_truth(fields[4]);
        out.push_back(r);
    }
    return out;
}

std::vector<ManifestRecord> build_dataset(const std::string& out_dir,
                                          const std::string& manifest_path,
                                          int n, const std::string& kind,
                                          double p_noise, std::uint64_t seed) {
    if (n < 1) throw InvalidRequestError("build_dataset: n must be >= 1");
    if (kind != "short_noisy" && kind != "detailed")
        throw InvalidRequestError("build_dataset: unknown kind " + kind);
    namespace fs = std::filesystem;
    const fs::path images_dir = fs::path(out_dir) / "images";
    std::error_code ec;
    fs::create_directories(images_dir, ec);
    if (ec)
        throw std::runtime_error("cannot create " + images_dir.string() +
                                 ": " + ec.message());
    std::vector<ManifestRecord> records;
    records.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const std::uint64_t sample_seed = seed * 1000003ull + static_cast<std::uint64_t>(i);
        const SceneSpec scene = generate_scene(sample_seed);
        const ImageSample img = render(scene);
        CaptionPair cap = kind == "detailed"
                              ? caption_detailed(scene)
                              : caption_short(scene, p_noise, sample_seed);
        ManifestRecord r;
        r.image_id = "img" + std::to_string(sample_seed);
        r.image_path = (images_dir / (r.image_id + ".ppm")).string();
        r.kind = cap.kind;
        r.text = cap.text;
        // canonical sorted order, matching the on-disk manifest field
        r.ground_truth = scene.objects;
        std::sort(r.ground_truth.begin(), r.ground_truth.end());
        write_ppm(r.image_path, img.pixels);
        records.push_back(std::move(r));
    }
    write_manifest(manifest_path, records);
    return records;
}

}  // namespace tinyvlm
