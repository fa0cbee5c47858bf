#include <resfim/rng.hpp>
#include <resfim/rten.hpp>
#include <resfim/spectral.hpp>

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>

namespace resfim {

namespace {

bool centred_inside(Index idx, Index n, Index half)
{
    const Index c = (idx + n / 2) % n;
    return c >= n / 2 - half && c <= n / 2 + half;
}

} // namespace

bool in_swap_window(const SwapWindow& window, Index h, Index w, Index u, Index v)
{
    return centred_inside(u, h, window.half_height(h)) && centred_inside(v, w, window.half_width(w));
}

AmplitudeSpectrum swap_low_freq(const AmplitudeSpectrum& a_self, const AmplitudeSpectrum& a_other,
                                const SwapWindow& window)
{
    require_same_shape(a_self.values, a_other.values, "swap_low_freq");
    if (!(window.beta >= 0.0 && window.beta <= 0.5)) {
        throw std::out_of_range("swap window beta must lie in [0, 0.5]");
    }
    detail::require_image(a_self.values, "swap_low_freq");
    const Index d = a_self.values.dim(0), h = a_self.values.dim(1), w = a_self.values.dim(2);
    AmplitudeSpectrum out = a_self;
    for (Index u = 0; u < h; ++u) {
        if (!centred_inside(u, h, window.half_height(h))) continue;
        for (Index v = 0; v < w; ++v) {
            if (!centred_inside(v, w, window.half_width(w))) continue;
            for (Index ch = 0; ch < d; ++ch) {
                const Index at = (ch * h + u) * w + v;
                out.values[at] = a_other.values[at];
            }
        }
    }
    return out;
}

AmplitudeBank build_amplitude_bank(int client, std::span<const Sample> images)
{
    AmplitudeBank bank{client, {}};
    bank.spectra.reserve(images.size());
    for (const auto& s : images) bank.spectra.push_back(decompose(fft2d(s.image)).first);
    return bank;
}

Dataset simulate_entries(std::span<const Sample> client_data, std::span<const AmplitudeBank> foreign_banks,
                         const SwapWindow& window, std::uint64_t seed, std::span<const Index> indices,
                         const SimulationOptions& options)
{
    if (foreign_banks.empty()) throw std::invalid_argument("simulated dataset needs at least one foreign bank");
    std::vector<std::vector<std::size_t>> draws;
    for (const auto& bank : foreign_banks) {
        if (bank.spectra.empty()) {
            throw std::invalid_argument("amplitude bank of client " + std::to_string(bank.client) + " is empty");
        }
        std::vector<std::size_t> perm(bank.spectra.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        Rng rng(derive_seed(seed, {std::uint64_t(bank.client)}));
        std::shuffle(perm.begin(), perm.end(), rng);
        draws.push_back(std::move(perm));
    }

    const std::size_t per_image = foreign_banks.size();
    const std::size_t total = client_data.size() * per_image;
    Dataset out;
    out.reserve(indices.size());
    std::size_t cached = total;  // source image whose decomposition is held below
    std::pair<AmplitudeSpectrum, PhaseSpectrum> source;
    for (Index entry : indices) {
        if (entry < 0 || std::size_t(entry) >= total) throw std::out_of_range("simulated entry index out of range");
        const std::size_t i = std::size_t(entry) / per_image, b = std::size_t(entry) % per_image;
        if (i != cached) {
            source = decompose(fft2d(client_data[i].image));
            cached = i;
        }
        const auto& other = foreign_banks[b].spectra[draws[b][i % draws[b].size()]];
        Tensor image = ifft2d(recompose(swap_low_freq(source.first, other, window), source.second));
        if (options.clamp) image.data() = image.data().cwiseMax(0.0).cwiseMin(1.0);
        require_finite(image, "generate_simulated_dataset");
        out.push_back({std::move(image), client_data[i].label});
    }
    return out;
}

Dataset generate_simulated_dataset(std::span<const Sample> client_data, std::span<const AmplitudeBank> foreign_banks,
                                   const SwapWindow& window, std::uint64_t seed, const SimulationOptions& options)
{
    std::vector<Index> all(client_data.size() * foreign_banks.size());
    std::iota(all.begin(), all.end(), Index{0});
    return simulate_entries(client_data, foreign_banks, window, seed, all, options);
}

void save_banks(const std::filesystem::path& dir, std::span<const AmplitudeBank> banks)
{
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& bank : banks) {
        for (std::size_t i = 0; i < bank.spectra.size(); ++i) {
            const std::string file = "client" + std::to_string(bank.client) + "_" + std::to_string(i) + ".rten";
            save_rten(dir / file, bank.spectra[i].values);
            manifest.push_back({{"client", bank.client},
                                {"index", i},
                                {"file", file},
                                {"shape", bank.spectra[i].values.shape()}});
        }
    }
    std::ofstream os(dir / "manifest.json");
    os << manifest.dump(2) << '\n';
}

std::vector<AmplitudeBank> load_banks(const std::filesystem::path& dir)
{
    std::ifstream is(dir / "manifest.json");
    if (!is) throw FormatError("missing amplitude bank manifest in " + dir.string());
    const auto manifest = nlohmann::json::parse(is);
    std::vector<AmplitudeBank> banks;
    for (const auto& entry : manifest) {
        const int client = entry.at("client").get<int>();
        const auto index = entry.at("index").get<std::size_t>();
        auto it = std::find_if(banks.begin(), banks.end(), [&](const AmplitudeBank& b) { return b.client == client; });
        if (it == banks.end()) {
            banks.push_back({client, {}});
            it = std::prev(banks.end());
        }
        Tensor t = load_rten(dir / entry.at("file").get<std::string>());
        if (t.shape() != entry.at("shape").get<Shape>()) {
            throw FormatError("bank entry shape differs from manifest");
        }
        if (it->spectra.size() <= index) it->spectra.resize(index + 1);
        it->spectra[index] = AmplitudeSpectrum{std::move(t)};
    }
    return banks;
}

} // namespace resfim
