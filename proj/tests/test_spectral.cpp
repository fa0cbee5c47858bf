#include "oracles.hpp"

#include <resfim/spectral.hpp>

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace resfim;

namespace {

double max_abs(const Tensor& a, const Tensor& b) { return (a.data() - b.data()).cwiseAbs().maxCoeff(); }

Dataset random_images(std::size_t n, Index h, Index w, std::uint64_t seed)
{
    Dataset d;
    for (std::size_t i = 0; i < n; ++i) {
        d.push_back({oracle::random_tensor({1, h, w}, seed + i, 0.0, 1.0), oracle::random_labels({h, w}, 2, seed + 500 + i)});
    }
    return d;
}

} // namespace

TEST_CASE("fft of a constant image is pure DC")
{
    const Spectrum s = fft2d(Tensor({1, 4, 6}, 0.25));
    CHECK(s.real[0] == doctest::Approx(4 * 6 * 0.25));
    CHECK(s.imag[0] == doctest::Approx(0.0));
    for (Index i = 1; i < s.real.size(); ++i) {
        CHECK(std::abs(s.real[i]) < 1e-12);
        CHECK(std::abs(s.imag[i]) < 1e-12);
    }
    const auto [a, p] = decompose(s);
    CHECK(p.values[0] == 0.0);
}

TEST_CASE("fft matches a direct DFT")
{
    const Tensor x = oracle::random_tensor({2, 5, 8}, 3);
    const Spectrum s = fft2d(x);
    for (Index ch = 0; ch < 2; ++ch) {
        const auto ref = oracle::naive_dft(x, ch);
        for (Index i = 0; i < 40; ++i) {
            CHECK(std::abs(s.real[ch * 40 + i] - ref[std::size_t(i)].real()) < 1e-10);
            CHECK(std::abs(s.imag[ch * 40 + i] - ref[std::size_t(i)].imag()) < 1e-10);
        }
    }
}

TEST_CASE("inverse fft round trip and parseval")
{
    for (Index n : {1, 7, 16, 32}) {
        const Tensor x = oracle::random_tensor({1, n, n}, std::uint64_t(n));
        const Spectrum s = fft2d(x);
        const Spectrum back = ifft2d_complex(s);
        CHECK(max_abs(back.real, x) < 1e-10);
        CHECK(back.imag.data().cwiseAbs().maxCoeff() < 1e-10);
        const double energy = x.data().squaredNorm();
        const double spectral = (s.real.data().squaredNorm() + s.imag.data().squaredNorm()) / double(n * n);
        CHECK(std::abs(energy - spectral) <= 1e-9 * energy);
    }
}

TEST_CASE("fft rejects bad input")
{
    CHECK_THROWS_AS(fft2d(Tensor({4, 4})), ShapeError);
    CHECK_THROWS_AS(fft2d(Tensor({1, 0, 4})), ShapeError);
    Tensor x({1, 2, 2}, 0.0);
    x[1] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(fft2d(x), NonFiniteError);
}

TEST_CASE("amplitude and phase decomposition")
{
    Spectrum s{Tensor({1, 1, 2}, {0.0, -2.0}), Tensor({1, 1, 2}, {3.0, 0.0})};
    const auto [a, p] = decompose(s);
    CHECK(a.values[0] == doctest::Approx(3.0));
    CHECK(p.values[0] == doctest::Approx(std::numbers::pi / 2));
    CHECK(p.values[1] == doctest::Approx(std::numbers::pi));  // (-pi, pi]

    const Spectrum r{oracle::random_tensor({2, 6, 6}, 1), oracle::random_tensor({2, 6, 6}, 2)};
    const auto [ra, rp] = decompose(r);
    CHECK((ra.values.data().array() >= 0.0).all());
    CHECK((rp.values.data().array() > -std::numbers::pi).all());
    CHECK((rp.values.data().array() <= std::numbers::pi).all());
    const Spectrum back = recompose(ra, rp);
    CHECK(max_abs(back.real, r.real) < 1e-10);
    CHECK(max_abs(back.imag, r.imag) < 1e-10);
}

TEST_CASE("swap window geometry")
{
    CHECK(SwapWindow{0.0}.half_height(32) == 0);
    CHECK(SwapWindow{0.05}.half_height(32) == 1);
    CHECK(SwapWindow{0.5}.half_width(16) == 8);
    // Only DC is inside a zero-width window.
    Index inside = 0;
    for (Index u = 0; u < 8; ++u) {
        for (Index v = 0; v < 8; ++v) inside += in_swap_window(SwapWindow{0.0}, 8, 8, u, v) ? 1 : 0;
    }
    CHECK(inside == 1);
    CHECK(in_swap_window(SwapWindow{0.0}, 8, 8, 0, 0));
    CHECK(in_swap_window(SwapWindow{0.125}, 8, 8, 7, 1));
    CHECK(!in_swap_window(SwapWindow{0.125}, 8, 8, 2, 0));
}

TEST_CASE("low-frequency swap")
{
    const AmplitudeSpectrum self{oracle::random_tensor({1, 8, 8}, 1, 0.0, 1.0)};
    const AmplitudeSpectrum other{oracle::random_tensor({1, 8, 8}, 2, 0.0, 1.0)};

    const auto dc = swap_low_freq(self, other, SwapWindow{0.0});
    CHECK(dc.values[0] == other.values[0]);
    for (Index i = 1; i < 64; ++i) CHECK(dc.values[i] == self.values[i]);

    CHECK(swap_low_freq(self, self, SwapWindow{0.3}).values == self.values);
    CHECK(swap_low_freq(self, other, SwapWindow{0.5}).values == other.values);

    const auto mid = swap_low_freq(self, other, SwapWindow{0.125});
    for (Index u = 0; u < 8; ++u) {
        for (Index v = 0; v < 8; ++v) {
            const Index i = u * 8 + v;
            CHECK(mid.values[i] == (in_swap_window(SwapWindow{0.125}, 8, 8, u, v) ? other : self).values[i]);
        }
    }
    CHECK_THROWS_AS(swap_low_freq(self, AmplitudeSpectrum{Tensor({1, 4, 4})}, SwapWindow{}), ShapeError);
}

TEST_CASE("simulated dataset size, labels and determinism")
{
    for (int clients : {2, 3, 6}) {
        std::vector<AmplitudeBank> banks;
        for (int c = 1; c < clients; ++c) banks.push_back(build_amplitude_bank(c, random_images(4, 8, 8, 100 * c)));
        const Dataset local = random_images(5, 8, 8, 7);
        const Dataset sim = generate_simulated_dataset(local, banks, SwapWindow{0.1}, 3);
        REQUIRE(sim.size() == 5 * std::size_t(clients - 1));
        for (std::size_t i = 0; i < sim.size(); ++i) {
            CHECK(sim[i].label == local[i / std::size_t(clients - 1)].label);
            CHECK(sim[i].image.data().minCoeff() >= 0.0);
            CHECK(sim[i].image.data().maxCoeff() <= 1.0);
        }
        const Dataset again = generate_simulated_dataset(local, banks, SwapWindow{0.1}, 3);
        for (std::size_t i = 0; i < sim.size(); ++i) CHECK(sim[i].image == again[i].image);
    }
}

TEST_CASE("simulation preserves the source phase")
{
    const Dataset local = random_images(3, 16, 16, 1);
    const std::vector<AmplitudeBank> banks{build_amplitude_bank(1, random_images(3, 16, 16, 50)),
                                           build_amplitude_bank(2, random_images(3, 16, 16, 80))};
    const Dataset sim = generate_simulated_dataset(local, banks, SwapWindow{0.2}, 9, SimulationOptions{false});
    for (std::size_t i = 0; i < sim.size(); ++i) {
        const auto [a0, p0] = decompose(fft2d(local[i / 2].image));
        const auto [a1, p1] = decompose(fft2d(sim[i].image));
        for (Index k = 0; k < p0.values.size(); ++k) {
            if (a0.values[k] <= 1e-9 || a1.values[k] <= 1e-9) continue;
            double d = std::abs(p0.values[k] - p1.values[k]);
            d = std::min(d, 2 * std::numbers::pi - d);
            CHECK(d < 1e-8);
        }
    }
}

TEST_CASE("self amplitudes make the simulation a no-op")
{
    const Dataset local = random_images(4, 8, 8, 21);
    AmplitudeBank same = build_amplitude_bank(1, local);
    // Every bank entry equals the source amplitude: use one-image banks per source.
    for (std::size_t i = 0; i < local.size(); ++i) {
        const std::vector<AmplitudeBank> banks{{1, {same.spectra[i]}}};
        const Dataset sim = generate_simulated_dataset(std::span(local).subspan(i, 1), banks, SwapWindow{0.25}, 1);
        CHECK(max_abs(sim[0].image, local[i].image) < 1e-9);
    }
}

TEST_CASE("simulation rejects missing or empty banks")
{
    const Dataset local = random_images(2, 8, 8, 1);
    CHECK_THROWS_AS(generate_simulated_dataset(local, {}, SwapWindow{}, 1), std::invalid_argument);
    const std::vector<AmplitudeBank> empty{{3, {}}};
    CHECK_THROWS_AS(generate_simulated_dataset(local, empty, SwapWindow{}, 1), std::invalid_argument);
}

TEST_CASE("amplitude banks hold one spectrum per image and survive a save/load round trip")
{
    const auto dir = std::filesystem::temp_directory_path() / "resfim-test-banks";
    std::filesystem::remove_all(dir);
    const std::vector<AmplitudeBank> banks{build_amplitude_bank(0, random_images(3, 8, 8, 1)),
                                           build_amplitude_bank(4, random_images(2, 8, 8, 9))};
    CHECK(banks[0].spectra.size() == 3);
    save_banks(dir, banks);
    const auto back = load_banks(dir);
    REQUIRE(back.size() == 2);
    CHECK(back[1].client == 4);
    REQUIRE(back[1].spectra.size() == 2);
    CHECK(back[1].spectra[1].values == banks[1].spectra[1].values);
    std::filesystem::remove_all(dir);
    CHECK_THROWS(load_banks(dir));
}

TEST_CASE("selected simulated entries match the full simulated dataset")
{
    const Dataset local = random_images(6, 8, 8, 3);
    const std::vector<AmplitudeBank> banks{build_amplitude_bank(1, random_images(4, 8, 8, 30)),
                                           build_amplitude_bank(2, random_images(2, 8, 8, 60))};
    const Dataset full = generate_simulated_dataset(local, banks, SwapWindow{0.1}, 5);
    const std::vector<Index> picked{0, 3, 4, 11};
    const Dataset some = simulate_entries(local, banks, SwapWindow{0.1}, 5, picked);
    REQUIRE(some.size() == picked.size());
    for (std::size_t k = 0; k < picked.size(); ++k) {
        CHECK(some[k].image == full[std::size_t(picked[k])].image);
        CHECK(some[k].label == full[std::size_t(picked[k])].label);
    }
    const std::vector<Index> bad{12};
    CHECK_THROWS_AS(simulate_entries(local, banks, SwapWindow{0.1}, 5, bad), std::out_of_range);
}
