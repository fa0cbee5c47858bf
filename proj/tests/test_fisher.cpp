#include "oracles.hpp"

#include <resfim/fisher.hpp>
#include <resfim/rten.hpp>

#include <doctest.h>

#include <algorithm>

using namespace resfim;

namespace {

FisherDiagonal diag(const LayoutPtr& layout, std::vector<double> v)
{
    return {layout, Eigen::Map<Eigen::VectorXd>(v.data(), Index(v.size())), 1};
}

ResFimScores scores(std::vector<double> v)
{
    return {oracle::make_layout({Index(v.size())}), Eigen::Map<Eigen::VectorXd>(v.data(), Index(v.size()))};
}

std::vector<Index> set_bits(const BinaryMask& m)
{
    std::vector<Index> out;
    for (Index i = 0; i < m.size(); ++i) {
        if (m[i]) out.push_back(i);
    }
    return out;
}

Model tiny_model(std::uint64_t seed)
{
    Model m = sequential({conv2d_layer("input", "conv", 1, 2), batchnorm_layer("input", "bn", 2), relu_layer("input", "relu"),
                          dense_layer("classifier", "fc", 2, 2)},
                         1, 2);
    init_parameters(m, seed);
    m.layers()[1].running_mean = Tensor({2}, {0.1, -0.2});
    m.layers()[1].running_var = Tensor({2}, {0.8, 1.3});
    return m;
}

Dataset tiny_dataset(std::size_t n, std::uint64_t seed)
{
    Dataset d;
    for (std::size_t i = 0; i < n; ++i) {
        d.push_back({oracle::random_tensor({1, 4, 4}, seed + i, 0.0, 1.0), oracle::random_labels({4, 4}, 2, seed + 100 + i)});
    }
    return d;
}

} // namespace

TEST_CASE("empirical fisher equals the mean of per-sample squared gradients")
{
    const Model m = tiny_model(3);
    const Dataset data = tiny_dataset(3, 10);
    Eigen::VectorXd expected = Eigen::VectorXd::Zero(m.layout()->total);
    for (const auto& s : data) {
        const Tensor x = s.image.reshaped({1, 1, 4, 4});
        const LabelTensor y = s.label.reshaped({1, 4, 4});
        expected += loss_and_grad(m, x, y, Mode::Eval).grad.values.cwiseAbs2();
    }
    expected /= 3.0;
    const FisherDiagonal f = fisher_diagonal(m, data);
    CHECK(f.sample_count == 3);
    CHECK((f.values - expected).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((f.values.array() >= 0.0).all());
}

TEST_CASE("single-sample fisher is the squared gradient")
{
    const Model m = tiny_model(4);
    const Dataset data = tiny_dataset(1, 20);
    const auto g = loss_and_grad(m, data[0].image.reshaped({1, 1, 4, 4}), data[0].label.reshaped({1, 4, 4}), Mode::Eval);
    CHECK(fisher_diagonal(m, data).values == g.grad.values.cwiseAbs2());
}

TEST_CASE("fisher vanishes at a per-sample loss minimum")
{
    // Constant input with balanced labels: uniform prediction is optimal and
    // every gradient entry is exactly zero.
    Model m = sequential({dense_layer("classifier", "fc", 1, 2)}, 1, 2);
    const Dataset data{{Tensor({1, 1, 2}, 0.5), LabelTensor({1, 2}, {0, 1})}};
    CHECK(fisher_diagonal(m, data).values.isZero(0.0));
}

TEST_CASE("fisher is invariant to dataset order")
{
    const Model m = tiny_model(5);
    Dataset data = tiny_dataset(5, 30);
    const auto a = fisher_diagonal(m, data);
    std::reverse(data.begin(), data.end());
    const auto b = fisher_diagonal(m, data);
    CHECK((a.values - b.values).cwiseAbs().maxCoeff() <= 1e-15 * a.values.cwiseAbs().maxCoeff());
}

TEST_CASE("sampled fisher is seeded and averages label draws")
{
    const Model m = tiny_model(6);
    const Dataset data = tiny_dataset(3, 40);
    FisherOptions opt{FisherMode::Sampled, 1};
    CHECK(fisher_diagonal(m, data, opt, 7).values == fisher_diagonal(m, data, opt, 7).values);
    CHECK(fisher_diagonal(m, data, opt, 7).values != fisher_diagonal(m, data, opt, 8).values);
    opt.label_draws = 4;
    const auto f = fisher_diagonal(m, data, opt, 7);
    CHECK(f.values.allFinite());
    CHECK((f.values.array() >= 0.0).all());
    opt.label_draws = 0;
    CHECK_THROWS(fisher_diagonal(m, data, opt, 7));
}

TEST_CASE("fisher rejects an empty dataset")
{
    CHECK_THROWS_AS(fisher_diagonal(tiny_model(1), Dataset{}), std::invalid_argument);
}

TEST_CASE("subsample draws without replacement in index order")
{
    const Dataset data = tiny_dataset(10, 50);
    const Dataset s = subsample(data, 4, 1);
    REQUIRE(s.size() == 4);
    std::vector<std::size_t> idx;
    for (const auto& x : s) {
        const auto it = std::find_if(data.begin(), data.end(), [&](const Sample& d) { return d.image == x.image; });
        REQUIRE(it != data.end());
        idx.push_back(std::size_t(it - data.begin()));
    }
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    CHECK(std::adjacent_find(idx.begin(), idx.end()) == idx.end());
    CHECK(subsample(data, 20, 1).size() == 10);
    CHECK(subsample(data, 4, 1)[0].image == s[0].image);
    CHECK_THROWS(subsample(data, 0, 1));
}

TEST_CASE("resfim normalises by the global maximum difference")
{
    const auto layout = oracle::make_layout({3});
    const auto s = resfim::resfim(diag(layout, {1.0, 3.0, 5.0}), diag(layout, {1.0, 1.0, 1.0}));
    CHECK(s.values[0] == 0.0);
    CHECK(s.values[1] == doctest::Approx(0.5));
    CHECK(s.values[2] == 1.0);

    const auto eq = resfim::resfim(diag(layout, {0.2, 0.3, 0.4}), diag(layout, {0.2, 0.3, 0.4}));
    CHECK(eq.values.isZero(0.0));

    const auto tiny = resfim::resfim(diag(layout, {0.0, 1e-15, 0.0}), diag(layout, {0.0, 0.0, 0.0}), 1e-12);
    CHECK(tiny.values[0] == 0.0);
    CHECK(tiny.values[1] == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(tiny.values[2] == 0.0);
}

TEST_CASE("elementwise normalisation sets every distinguishable entry to one")
{
    const auto layout = oracle::make_layout({3});
    const auto s = resfim::resfim(diag(layout, {0.0, 2.0, 4.0}), diag(layout, {0.0, 0.0, 0.0}), 1e-12, ResFimNormalization::Elementwise);
    CHECK(s.values[0] == 0.0);
    CHECK(s.values[1] == 1.0);
    CHECK(s.values[2] == 1.0);
}

TEST_CASE("resfim is symmetric and scale invariant")
{
    const auto layout = oracle::make_layout({50});
    const Tensor a = oracle::random_tensor({50}, 1, 0.0, 1.0), b = oracle::random_tensor({50}, 2, 0.0, 1.0);
    const FisherDiagonal fa{layout, a.data(), 1}, fb{layout, b.data(), 1};
    const auto s = resfim::resfim(fa, fb);
    CHECK(s.values == resfim::resfim(fb, fa).values);
    CHECK(s.values.maxCoeff() == 1.0);
    CHECK(s.values.minCoeff() >= 0.0);
    const FisherDiagonal sa{layout, 7.5 * a.data(), 1}, sb{layout, 7.5 * b.data(), 1};
    CHECK((resfim::resfim(sa, sb).values - s.values).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("resfim validates its inputs")
{
    const auto l3 = oracle::make_layout({3}), l4 = oracle::make_layout({4});
    CHECK_THROWS_AS(resfim::resfim(diag(l3, {0, 0, 0}), diag(l4, {0, 0, 0, 0})), LayoutMismatch);
    CHECK_THROWS_AS(resfim::resfim(diag(l3, {0, 0, 0}), diag(l3, {0, 0, 0}), 0.0), std::invalid_argument);
    CHECK_THROWS_AS(resfim::resfim(diag(l3, {0, 0, 0}), diag(l3, {0, 0, 0}), -1.0), std::invalid_argument);
}

TEST_CASE("build_mask selects the top scores with index tie breaking")
{
    CHECK(set_bits(build_mask(scores({0.9, 0.1, 0.9, 0.5}), 50)) == std::vector<Index>{0, 2});
    CHECK(set_bits(build_mask(scores({0.5, 0.5, 0.1, 0.1}), 25)) == std::vector<Index>{0});
    CHECK(build_mask(scores({0.3, 0.2, 0.1}), 0).popcount() == 0);
    CHECK(build_mask(scores({0.3, 0.2, 0.1}), 100).popcount() == 3);
    CHECK(build_mask(scores({0.3, 0.2, 0.1}), 100).delta_percent == 100.0);
    CHECK_THROWS_AS(build_mask(scores({0.3}), -1), std::out_of_range);
    CHECK_THROWS_AS(build_mask(scores({0.3}), 100.5), std::out_of_range);
}

TEST_CASE("mask count rounds half up")
{
    CHECK(mask_count(50, 3) == 2);   // 1.5
    CHECK(mask_count(10, 4) == 0);   // 0.4
    CHECK(mask_count(12.5, 4) == 1); // 0.5
    CHECK(mask_count(1, 1000) == 10);
}

TEST_CASE("masks are nested in delta and depend only on score order")
{
    const auto s = scores(std::vector<double>(200, 0.0));
    ResFimScores r = s;
    r.values = oracle::random_tensor({200}, 11, 0.0, 1.0).data();
    r.values[5] = r.values[6];  // a tie
    ResFimScores t = r;
    t.values = (r.values.array() * 3.0 + 1.0).exp();  // strictly monotone
    Index last = -1;
    BinaryMask prev = build_mask(r, 0);
    for (double delta = 0; delta <= 100; delta += 2.5) {
        const BinaryMask m = build_mask(r, delta);
        CHECK(m.popcount() == mask_count(delta, 200));
        CHECK(m.popcount() >= last);
        for (Index i = 0; i < m.size(); ++i) CHECK((!prev[i] || m[i]));
        CHECK(m.bits == build_mask(t, delta).bits);
        last = m.popcount();
        prev = m;
    }
}

TEST_CASE("static masks")
{
    const Model m = build_mini_unet({}, 1);
    const auto& layout = m.layout();
    CHECK(static_mask(layout, MaskPolicy::FedAvg).popcount() == 0);
    CHECK(static_mask(layout, MaskPolicy::Local).popcount() == layout->total);

    const BinaryMask bn = static_mask(layout, MaskPolicy::FedBN);
    const BinaryMask per = static_mask(layout, MaskPolicy::FedPer);
    Index bn_count = 0;
    for (const auto& e : layout->entries) {
        for (Index i = e.offset; i < e.offset + e.length; ++i) {
            CHECK(bn[i] == (e.kind == LayerKind::BatchNorm2D));
            CHECK(per[i] == (e.layer_id == "classifier"));
        }
        if (e.kind == LayerKind::BatchNorm2D) bn_count += e.length;
    }
    CHECK(bn.popcount() == bn_count);
    CHECK(per.popcount() == layout->layer_size("classifier"));

    const Model no_bn = sequential({conv2d_layer("input", "conv", 1, 2)}, 1, 2);
    CHECK_THROWS_AS(static_mask(no_bn.layout(), MaskPolicy::FedBN), std::invalid_argument);
    CHECK_THROWS_AS(static_mask(no_bn.layout(), MaskPolicy::FedPer), std::invalid_argument);
    CHECK_THROWS_AS(static_mask(no_bn.layout(), MaskPolicy::ResFim), std::invalid_argument);
}

TEST_CASE("fedbn on a 100-parameter model with 10 batchnorm parameters")
{
    // conv 1->1 (10) + bn (2) + conv 1->4 (40) + bn (8) + dense 4->8 (40).
    Model m = sequential({conv2d_layer("input", "conv", 1, 1), batchnorm_layer("input", "bn", 1),
                          conv2d_layer("enc1", "conv", 1, 4), batchnorm_layer("enc1", "bn", 4),
                          dense_layer("classifier", "fc", 4, 8)},
                         1, 8);
    REQUIRE(m.layout()->total == 100);
    CHECK(static_mask(m.layout(), MaskPolicy::FedBN).popcount() == 10);
}

TEST_CASE("per-layer masking rates")
{
    const auto layout = oracle::make_layout({2, 3, 4});
    BinaryMask m{layout, {1, 0, 0, 0, 0, 1, 1, 1, 1}, 0};
    const auto rates = per_layer_masking_rate(m, layout);
    REQUIRE(rates.size() == 3);
    CHECK(rates[0].layer_id == "l0");
    CHECK(rates[0].rate == 0.5);
    CHECK(rates[1].rate == 0.0);
    CHECK(rates[2].rate == 1.0);
    for (auto p : {MaskPolicy::FedAvg, MaskPolicy::Local}) {
        for (const auto& r : per_layer_masking_rate(static_mask(layout, p), layout)) {
            CHECK(r.rate == (p == MaskPolicy::Local ? 1.0 : 0.0));
        }
    }
    CHECK_THROWS_AS(per_layer_masking_rate(m, oracle::make_layout({9})), LayoutMismatch);
}

TEST_CASE("mask blobs round trip and carry the layout hash")
{
    const auto layout = oracle::make_layout({5, 6});
    BinaryMask m{layout, {1, 0, 1, 1, 0, 0, 0, 1, 0, 1, 1}, 37.5};
    const std::string blob = encode_mask(m);
    CHECK(blob.size() == 24 + 2);
    const BinaryMask back = decode_mask(blob, layout);
    CHECK(back.bits == m.bits);
    CHECK(back.delta_percent == 37.5);
    CHECK_THROWS_AS(decode_mask(blob, oracle::make_layout({11})), LayoutMismatch);
    CHECK_THROWS_AS(decode_mask(blob.substr(0, 20), layout), FormatError);
    CHECK_THROWS_AS(decode_mask(blob + "x", layout), FormatError);
}

TEST_CASE("policy names round trip")
{
    for (auto p : {MaskPolicy::ResFim, MaskPolicy::FedAvg, MaskPolicy::FedBN, MaskPolicy::FedPer, MaskPolicy::Local}) {
        CHECK(parse_policy(to_string(p)) == p);
    }
    CHECK_THROWS_AS(parse_policy("fedprox"), std::invalid_argument);
}
