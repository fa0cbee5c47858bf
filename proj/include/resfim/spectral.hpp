#pragma once

#include <resfim/dataset.hpp>
#include <resfim/tensor.hpp>

#include <unsupported/Eigen/FFT>

#include <complex>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <vector>

namespace resfim {

/// Per-channel 2-D DFT of a [D,H,W] image, in standard (uncentered) layout.
template <class Scalar_>
struct BasicSpectrum {
    BasicTensor<Scalar_> real;
    BasicTensor<Scalar_> imag;
};

template <class Scalar_>
struct BasicAmplitude {
    BasicTensor<Scalar_> values;  // >= 0
};

template <class Scalar_>
struct BasicPhase {
    BasicTensor<Scalar_> values;  // in (-pi, pi]
};

using Spectrum = BasicSpectrum<double>;
using AmplitudeSpectrum = BasicAmplitude<double>;
using PhaseSpectrum = BasicPhase<double>;

namespace detail {

template <class Scalar>
void require_image(const BasicTensor<Scalar>& t, const char* what)
{
    if (t.rank() != 3 || t.dim(1) < 1 || t.dim(2) < 1) {
        throw ShapeError(std::string(what) + ": expected a [D,H,W] tensor with H,W >= 1, got " +
                         shape_string(t.shape()));
    }
}

// In-place 2-D transform of every channel; inverse transforms are scaled by 1/(H*W).
template <class Scalar>
void transform_2d(BasicTensor<Scalar>& re, BasicTensor<Scalar>& im, bool inverse)
{
    using Complex = std::complex<Scalar>;
    const Index d = re.dim(0), h = re.dim(1), w = re.dim(2);
    Eigen::FFT<Scalar> fft;
    std::vector<Complex> in, out;
    auto run = [&](Index count, Index len, auto index_of) {
        if (len == 1) return;  // identity; kissfft cannot plan a length-1 transform
        in.resize(std::size_t(len));
        for (Index ch = 0; ch < d; ++ch) {
            for (Index line = 0; line < count; ++line) {
                for (Index k = 0; k < len; ++k) {
                    const Index at = ch * h * w + index_of(line, k);
                    in[std::size_t(k)] = Complex(re[at], im[at]);
                }
                if (inverse) {
                    fft.inv(out, in);
                } else {
                    fft.fwd(out, in);
                }
                for (Index k = 0; k < len; ++k) {
                    const Index at = ch * h * w + index_of(line, k);
                    re[at] = out[std::size_t(k)].real();
                    im[at] = out[std::size_t(k)].imag();
                }
            }
        }
    };
    run(h, w, [w](Index row, Index k) { return row * w + k; });
    run(w, h, [w](Index col, Index k) { return k * w + col; });
}

} // namespace detail

template <class Scalar>
BasicSpectrum<Scalar> fft2d(const BasicTensor<Scalar>& image)
{
    detail::require_image(image, "fft2d");
    require_finite(image, "fft2d");
    BasicSpectrum<Scalar> s{image, BasicTensor<Scalar>(image.shape())};
    detail::transform_2d(s.real, s.imag, false);
    return s;
}

/// Full complex inverse; the round trip of a real image leaves an imaginary
/// residue at rounding level.
template <class Scalar>
BasicSpectrum<Scalar> ifft2d_complex(const BasicSpectrum<Scalar>& spectrum)
{
    detail::require_image(spectrum.real, "ifft2d");
    require_same_shape(spectrum.real, spectrum.imag, "ifft2d");
    BasicSpectrum<Scalar> s = spectrum;
    detail::transform_2d(s.real, s.imag, true);
    return s;
}

/// Inverse transform keeping the real part.
template <class Scalar>
BasicTensor<Scalar> ifft2d(const BasicSpectrum<Scalar>& spectrum)
{
    return ifft2d_complex(spectrum).real;
}

template <class Scalar>
std::pair<BasicAmplitude<Scalar>, BasicPhase<Scalar>> decompose(const BasicSpectrum<Scalar>& s)
{
    require_same_shape(s.real, s.imag, "decompose");
    BasicAmplitude<Scalar> a{BasicTensor<Scalar>(s.real.shape())};
    BasicPhase<Scalar> p{BasicTensor<Scalar>(s.real.shape())};
    for (Index i = 0; i < s.real.size(); ++i) {
        a.values[i] = std::hypot(s.real[i], s.imag[i]);
        Scalar angle = std::atan2(s.imag[i], s.real[i]);
        if (angle <= -std::numbers::pi_v<Scalar>) angle = std::numbers::pi_v<Scalar>;
        p.values[i] = angle;
    }
    return {std::move(a), std::move(p)};
}

template <class Scalar>
BasicSpectrum<Scalar> recompose(const BasicAmplitude<Scalar>& a, const BasicPhase<Scalar>& p)
{
    require_same_shape(a.values, p.values, "recompose");
    BasicSpectrum<Scalar> s{BasicTensor<Scalar>(a.values.shape()), BasicTensor<Scalar>(a.values.shape())};
    s.real.data() = (a.values.data().array() * p.values.data().array().cos()).matrix();
    s.imag.data() = (a.values.data().array() * p.values.data().array().sin()).matrix();
    return s;
}

/// Low-frequency window: the centred (2*hb+1) x (2*wb+1) block of the
/// zero-frequency-centred spectrum, hb = floor(beta*H), wb = floor(beta*W).
struct SwapWindow {
    double beta = 0.05;

    Index half_height(Index h) const { return Index(std::floor(beta * double(h))); }
    Index half_width(Index w) const { return Index(std::floor(beta * double(w))); }
};

/// True where the (uncentred) bin (u,v) falls inside the window.
bool in_swap_window(const SwapWindow& window, Index h, Index w, Index u, Index v);

AmplitudeSpectrum swap_low_freq(const AmplitudeSpectrum& a_self, const AmplitudeSpectrum& a_other,
                                const SwapWindow& window);

/// Amplitude spectra of one client's training images, shared once at bootstrap.
struct AmplitudeBank {
    int client = 0;
    std::vector<AmplitudeSpectrum> spectra;
};

AmplitudeBank build_amplitude_bank(int client, std::span<const Sample> images);

struct SimulationOptions {
    bool clamp = true;  // clamp recomposed pixels to [0,1]
};

/// For every local image, one restyled copy per foreign bank: the low-frequency
/// amplitude comes from a bank entry, the phase stays the image's own. Entries
/// are drawn from a seeded permutation of each bank, so draws within one call
/// repeat only once a bank is exhausted. Output order: image-major, then bank.
Dataset generate_simulated_dataset(std::span<const Sample> client_data, std::span<const AmplitudeBank> foreign_banks,
                                   const SwapWindow& window, std::uint64_t seed, const SimulationOptions& options = {});

/// Selected entries of generate_simulated_dataset (same seed, same values)
/// without materialising the rest. `indices` address the full output order.
Dataset simulate_entries(std::span<const Sample> client_data, std::span<const AmplitudeBank> foreign_banks,
                         const SwapWindow& window, std::uint64_t seed, std::span<const Index> indices,
                         const SimulationOptions& options = {});

/// Directory layout: one RTEN per spectrum plus manifest.json with
/// (client, index, file, shape) entries.
void save_banks(const std::filesystem::path& dir, std::span<const AmplitudeBank> banks);
std::vector<AmplitudeBank> load_banks(const std::filesystem::path& dir);

} // namespace resfim
