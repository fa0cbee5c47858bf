#include <resfim/data.hpp>
#include <resfim/rng.hpp>
#include <resfim/rten.hpp>

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

namespace resfim {

namespace {

constexpr double kBackground = 0.35;
constexpr double kForeground = 0.65;

Tensor gaussian_blur(const Tensor& image, double sigma)
{
    if (sigma <= 0.0) return image;
    const Index h = image.dim(1), w = image.dim(2);
    const Index radius = Index(std::ceil(3.0 * sigma));
    Eigen::VectorXd kernel(2 * radius + 1);
    for (Index k = -radius; k <= radius; ++k) kernel[k + radius] = std::exp(-0.5 * double(k * k) / (sigma * sigma));
    kernel /= kernel.sum();
    auto clampi = [](Index v, Index n) { return std::clamp<Index>(v, 0, n - 1); };
    Tensor tmp(image.shape()), out(image.shape());
    for (Index c = 0; c < image.dim(0); ++c) {
        const Index base = c * h * w;
        for (Index y = 0; y < h; ++y) {
            for (Index x = 0; x < w; ++x) {
                double s = 0.0;
                for (Index k = -radius; k <= radius; ++k) s += kernel[k + radius] * image[base + y * w + clampi(x + k, w)];
                tmp[base + y * w + x] = s;
            }
        }
        for (Index y = 0; y < h; ++y) {
            for (Index x = 0; x < w; ++x) {
                double s = 0.0;
                for (Index k = -radius; k <= radius; ++k) s += kernel[k + radius] * tmp[base + clampi(y + k, h) * w + x];
                out[base + y * w + x] = s;
            }
        }
    }
    return out;
}

DomainStyle style(double brightness, double contrast, double texture, double band_lo, double band_hi, double blur)
{
    return DomainStyle{brightness, contrast, texture, band_lo, band_hi, blur};
}

} // namespace

BenchmarkSpec heterogeneous_benchmark(int clients, Index samples_per_client, Index image_size)
{
    BenchmarkSpec spec;
    spec.clients = clients;
    spec.samples_per_client = samples_per_client;
    spec.image_size = image_size;
    const std::vector<DomainStyle> presets{
        style(0.00, 1.00, 0.05, 1.0, 2.0, 0.0),
        style(0.22, 0.55, 0.12, 1.0, 3.0, 0.6),
        style(-0.20, 1.40, 0.06, 2.0, 4.0, 0.0),
        style(0.10, -0.90, 0.15, 1.0, 2.0, 1.0),
        style(-0.12, 0.45, 0.20, 1.0, 3.0, 0.0),
        style(0.00, -1.25, 0.08, 2.0, 3.0, 0.7),
    };
    for (int c = 0; c < clients; ++c) {
        DomainStyle s = presets[std::size_t(c) % presets.size()];
        // Beyond the presets, shift brightness so styles stay pairwise distinct.
        s.brightness += 0.03 * double(c / int(presets.size()));
        spec.styles.push_back(s);
    }
    return spec;
}

BenchmarkSpec homogeneous_benchmark(int clients, Index samples_per_client, Index image_size)
{
    BenchmarkSpec spec;
    spec.clients = clients;
    spec.samples_per_client = samples_per_client;
    spec.image_size = image_size;
    spec.styles.assign(std::size_t(clients), style(0.0, 1.0, 0.05, 1.0, 2.0, 0.0));
    return spec;
}

SplitSizes split_sizes(Index n, const SplitRatio& ratio)
{
    const double total = ratio.train + ratio.val + ratio.test;
    if (!(ratio.train > 0 && ratio.val > 0 && ratio.test > 0)) throw std::invalid_argument("split ratios must be positive");
    SplitSizes s;
    s.train = Index(std::floor(double(n) * ratio.train / total + 0.5));
    s.val = Index(std::floor(double(n) * ratio.val / total + 0.5));
    s.test = n - s.train - s.val;
    if (s.train < 1 || s.val < 1 || s.test < 1) {
        throw std::invalid_argument("degenerate split: " + std::to_string(n) + " samples give an empty split");
    }
    return s;
}

Sample render_geometry(Index image_size, Index max_blobs, std::uint64_t seed)
{
    Rng rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double s = double(image_size);
    const Index blobs = 1 + Index(unif(rng) * double(max_blobs)) % max_blobs;

    struct Blob {
        double cy, cx, ry, rx, theta, a2, p2, a3, p3;
    };
    std::vector<Blob> shapes;
    for (Index b = 0; b < blobs; ++b) {
        Blob bl{};
        bl.cy = s * (0.25 + 0.5 * unif(rng));
        bl.cx = s * (0.25 + 0.5 * unif(rng));
        bl.ry = s * (0.10 + 0.16 * unif(rng));
        bl.rx = s * (0.10 + 0.16 * unif(rng));
        bl.theta = std::numbers::pi * unif(rng);
        bl.a2 = 0.15 * unif(rng);
        bl.p2 = 2.0 * std::numbers::pi * unif(rng);
        bl.a3 = 0.12 * unif(rng);
        bl.p3 = 2.0 * std::numbers::pi * unif(rng);
        shapes.push_back(bl);
    }

    Sample out{Tensor({1, image_size, image_size}, kBackground), LabelTensor({image_size, image_size})};
    for (Index y = 0; y < image_size; ++y) {
        for (Index x = 0; x < image_size; ++x) {
            for (const auto& bl : shapes) {
                const double dy = double(y) + 0.5 - bl.cy, dx = double(x) + 0.5 - bl.cx;
                const double u = dx * std::cos(bl.theta) + dy * std::sin(bl.theta);
                const double v = -dx * std::sin(bl.theta) + dy * std::cos(bl.theta);
                const double phi = std::atan2(v, u);
                // Smoothly deformed ellipse boundary.
                const double boundary = 1.0 + bl.a2 * std::cos(2.0 * phi + bl.p2) + bl.a3 * std::cos(3.0 * phi + bl.p3);
                if ((u * u) / (bl.rx * bl.rx) + (v * v) / (bl.ry * bl.ry) <= boundary * boundary) {
                    out.image[y * image_size + x] = kForeground;
                    out.label[y * image_size + x] = 1;
                    break;
                }
            }
        }
    }
    return out;
}

Tensor apply_style(const Tensor& image, const DomainStyle& st, double noise_sigma, std::uint64_t seed)
{
    Rng rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    const Index h = image.dim(1), w = image.dim(2);

    Tensor out = gaussian_blur(image, st.blur_radius);
    out.data().array() = 0.5 + st.contrast * (out.data().array() - 0.5) + st.brightness;

    if (st.texture_amplitude > 0.0) {
        constexpr int kWaves = 3;
        for (int k = 0; k < kWaves; ++k) {
            const double f = st.texture_band_low + (st.texture_band_high - st.texture_band_low) * unif(rng);
            const double dir = 2.0 * std::numbers::pi * unif(rng);
            const double phase = 2.0 * std::numbers::pi * unif(rng);
            const double fy = f * std::sin(dir) / double(h), fx = f * std::cos(dir) / double(w);
            for (Index y = 0; y < h; ++y) {
                for (Index x = 0; x < w; ++x) {
                    out[y * w + x] += st.texture_amplitude / kWaves *
                                      std::cos(2.0 * std::numbers::pi * (fy * double(y) + fx * double(x)) + phase);
                }
            }
        }
    }
    if (noise_sigma > 0.0) {
        for (Index i = 0; i < out.size(); ++i) out[i] += noise_sigma * noise(rng);
    }
    out.data() = out.data().cwiseMax(0.0).cwiseMin(1.0);
    return out;
}

std::vector<ClientSplits> generate_benchmark(const BenchmarkSpec& spec, std::uint64_t seed)
{
    if (spec.clients < 2) throw std::invalid_argument("benchmark needs at least 2 clients");
    if (spec.samples_per_client < 10) throw std::invalid_argument("benchmark needs at least 10 samples per client");
    if (spec.image_size < 4 || spec.max_blobs < 1) throw std::invalid_argument("degenerate benchmark geometry");
    if (spec.styles.size() != std::size_t(spec.clients)) {
        throw std::invalid_argument("benchmark needs exactly one style per client");
    }
    const SplitSizes sizes = split_sizes(spec.samples_per_client, spec.split);
    std::vector<ClientSplits> out(std::size_t(spec.clients));
    for (int c = 0; c < spec.clients; ++c) {
        Dataset all;
        for (Index i = 0; i < spec.samples_per_client; ++i) {
            Sample geo = render_geometry(spec.image_size, spec.max_blobs,
                                         derive_seed(seed, {kBenchmarkStream, std::uint64_t(c), std::uint64_t(i), 0}));
            geo.image = apply_style(geo.image, spec.styles[std::size_t(c)], spec.noise_sigma,
                                    derive_seed(seed, {kBenchmarkStream, std::uint64_t(c), std::uint64_t(i), 1}));
            all.push_back(std::move(geo));
        }
        std::vector<Index> perm(all.size());
        std::iota(perm.begin(), perm.end(), Index{0});
        Rng rng(derive_seed(seed, {kSplitStream, std::uint64_t(c)}));
        std::shuffle(perm.begin(), perm.end(), rng);
        auto& splits = out[std::size_t(c)];
        for (Index k = 0; k < Index(perm.size()); ++k) {
            Sample& s = all[std::size_t(perm[std::size_t(k)])];
            if (k < sizes.train) {
                splits.train.push_back(std::move(s));
            } else if (k < sizes.train + sizes.val) {
                splits.val.push_back(std::move(s));
            } else {
                splits.test.push_back(std::move(s));
            }
        }
    }
    return out;
}

double dice_score(const LabelTensor& prediction, const LabelTensor& truth)
{
    require_same_shape(prediction, truth, "dice_score");
    Index inter = 0, p = 0, t = 0;
    for (Index i = 0; i < truth.size(); ++i) {
        const bool pi = prediction[i] > 0, ti = truth[i] > 0;
        inter += (pi && ti) ? 1 : 0;
        p += pi ? 1 : 0;
        t += ti ? 1 : 0;
    }
    if (p + t == 0) return 1.0;
    return 2.0 * double(inter) / double(p + t);
}

double evaluate(const Model& model, std::span<const Sample> dataset)
{
    if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
    constexpr std::size_t kChunk = 16;
    double total = 0.0;
    for (std::size_t start = 0; start < dataset.size(); start += kChunk) {
        const auto part = dataset.subspan(start, std::min(kChunk, dataset.size() - start));
        const Batch b = make_batch(part);
        const LabelTensor pred = predict(model, b.images);
        for (std::size_t i = 0; i < part.size(); ++i) {
            total += dice_score(slice_front(pred, Index(i)), part[i].label);
        }
    }
    return total / double(dataset.size());
}

void save_benchmark(const std::filesystem::path& dir, const std::vector<ClientSplits>& clients)
{
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["clients"] = nlohmann::json::array();
    for (std::size_t c = 0; c < clients.size(); ++c) {
        const fs::path sub = "client" + std::to_string(c);
        fs::create_directories(dir / sub);
        nlohmann::json entry{{"client", c}};
        auto dump = [&](const char* name, const Dataset& data) {
            nlohmann::json files = nlohmann::json::array();
            for (std::size_t i = 0; i < data.size(); ++i) {
                const std::string stem = std::string(name) + "_" + std::to_string(i);
                const Tensor& img = data[i].image;
                Tensor label(data[i].label.shape());
                label.data() = data[i].label.data().cast<double>();
                save_rten(dir / sub / (stem + "_image.rten"), img);
                save_rten(dir / sub / (stem + "_label.rten"), label);
                files.push_back({{"image", (sub / (stem + "_image.rten")).string()},
                                 {"label", (sub / (stem + "_label.rten")).string()}});
            }
            entry[name] = files;
        };
        dump("train", clients[c].train);
        dump("val", clients[c].val);
        dump("test", clients[c].test);
        manifest["clients"].push_back(entry);
    }
    if (!clients.empty() && !clients.front().train.empty()) {
        manifest["image_shape"] = clients.front().train.front().image.shape();
    }
    std::ofstream os(dir / "manifest.json");
    os << manifest.dump(2) << '\n';
}

std::vector<ClientSplits> load_benchmark(const std::filesystem::path& dir)
{
    std::ifstream is(dir / "manifest.json");
    if (!is) throw FormatError("missing benchmark manifest in " + dir.string());
    const auto manifest = nlohmann::json::parse(is);
    std::vector<ClientSplits> out;
    for (const auto& entry : manifest.at("clients")) {
        ClientSplits splits;
        auto load = [&](const char* name, Dataset& data) {
            for (const auto& f : entry.at(name)) {
                Sample s;
                s.image = load_rten(dir / f.at("image").get<std::string>());
                const Tensor label = load_rten(dir / f.at("label").get<std::string>());
                s.label = LabelTensor(label.shape());
                s.label.data() = label.data().cast<std::int32_t>();
                data.push_back(std::move(s));
            }
        };
        load("train", splits.train);
        load("val", splits.val);
        load("test", splits.test);
        out.push_back(std::move(splits));
    }
    return out;
}

} // namespace resfim
