#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "tcl/data_eval.hpp"
#include "tcl/rng.hpp"
#include "tcl/tensor_io.hpp"

using namespace tcl;

namespace {

SynthSpec tiny_spec() {
    SynthSpec s;
    s.num_identities = 4;
    s.clips_per_id = 3;
    s.frames_per_clip = 4;
    s.frame_h = 16;
    s.frame_w = 8;
    s.gallery_per_id = 1;
    s.query_per_id = 1;
    return s;
}

std::uint64_t dataset_digest(const Dataset& d) {
    std::uint64_t h = 0;
    for (const VideoClip& c : d.clips)
        for (const Tensor& f : c.frames) h ^= tensor_digest(f);
    return h;
}

} // namespace

TEST_CASE("generation is a pure function of spec and seed") {
    SynthSpec spec = tiny_spec();
    Dataset a = generate(spec, 99);
    Dataset b = generate(spec, 99);
    CHECK(dataset_digest(a) == dataset_digest(b));
    Dataset c = generate(spec, 100);
    CHECK(dataset_digest(a) != dataset_digest(c));

    SynthSpec bad = spec;
    bad.num_identities = 1;
    CHECK_THROWS_AS(generate(bad, 1), PreconditionError);
}

TEST_CASE("noiseless clips differ only by cyclic pose offsets") {
    SynthSpec spec = tiny_spec();
    spec.noise_sigma = 0.0;
    spec.occlusion_prob = 0.0;
    Dataset d = generate(spec, 7);

    // render the identity's banded appearance at shift 0
    const std::size_t h = spec.frame_h, w = spec.frame_w;
    const std::vector<int> heights = spec.band_heights();
    std::vector<double> base(h * w);
    std::size_t row = 0;
    for (int b = 0; b < spec.bands; ++b) {
        auto p = band_pattern(spec, 7, 0, b);
        for (int i = 0; i < heights[b]; ++i, ++row)
            for (std::size_t j = 0; j < w; ++j) base[row * w + j] = p[i * w + j];
    }
    for (const VideoClip& clip : d.clips) {
        if (clip.identity != 0) continue;
        for (const Tensor& f : clip.frames) {
            bool matched = false;
            for (std::size_t shift = 0; shift < w && !matched; ++shift) {
                bool all = true;
                for (std::size_t i = 0; i < h && all; ++i)
                    for (std::size_t j = 0; j < w && all; ++j)
                        all = f.at(0, i, j) == base[i * w + (j + w - shift % w) % w];
                matched = all;
            }
            CHECK(matched);
        }
    }
}

TEST_CASE("identity pairs share the salient band and differ elsewhere") {
    SynthSpec spec; // default corpus
    const std::uint64_t seed = 11;

    auto mean_abs_diff = [](const std::vector<double>& a, const std::vector<double>& b) {
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
        return acc / a.size();
    };

    auto sal0 = band_pattern(spec, seed, 0, spec.salient_band);
    auto sal1 = band_pattern(spec, seed, 1, spec.salient_band);
    CHECK(mean_abs_diff(sal0, sal1) < spec.noise_sigma); // identical by construction

    auto b3_0 = band_pattern(spec, seed, 0, 3);
    auto b3_1 = band_pattern(spec, seed, 1, 3);
    CHECK(mean_abs_diff(b3_0, b3_1) > 0.02);

    // the discriminative signal survives erasing the shared salient band
    for (int band = 0; band < spec.bands; ++band) {
        if (band == spec.salient_band) continue;
        CHECK(mean_abs_diff(band_pattern(spec, seed, 0, band),
                            band_pattern(spec, seed, 1, band)) > 0.02);
    }
}

TEST_CASE("occlusions appear at roughly the configured rate") {
    SynthSpec spec = tiny_spec();
    spec.num_identities = 8;
    spec.occlusion_prob = 0.5;
    spec.noise_sigma = 0.0;
    Dataset d = generate(spec, 3);
    std::size_t occluded = 0, total = 0;
    for (const VideoClip& c : d.clips)
        for (const Tensor& f : c.frames) {
            ++total;
            std::size_t gray = 0;
            for (double v : f.data()) gray += (v == 0.5);
            if (gray >= 64) ++occluded;
        }
    const double rate = static_cast<double>(occluded) / total;
    CHECK(rate > 0.25);
    CHECK(rate < 0.75);
}

TEST_CASE("rank_gallery self-match and forced geometry") {
    std::vector<std::vector<double>> gallery{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    auto order = rank_gallery({0, 1, 0}, gallery);
    CHECK(order[0] == 1);

    Rng rng(5);
    std::vector<double> q(6);
    for (double& v : q) v = rng.uniform(-1, 1);
    std::vector<std::vector<double>> g{q, {1, 1, 1, 1, 1, 1}, {0.5, -1, 2, 0, 0, 1}};
    CHECK(rank_gallery(q, g)[0] == 0);

    CHECK_THROWS_AS(rank_gallery({1.0, 2.0}, gallery), DimensionError);
}

TEST_CASE("rank_gallery matches the scalar cosine oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 2 + rng.below(8), d = 2 + rng.below(5);
        std::vector<double> q(d);
        for (double& v : q) v = rng.uniform(-1, 1);
        std::vector<std::vector<double>> gallery(n, std::vector<double>(d));
        for (auto& g : gallery)
            for (double& v : g) v = rng.uniform(-1, 1);
        auto order = rank_gallery(q, gallery);

        auto cosine = [&](const std::vector<double>& g) {
            double dot = 0, qn = 0, gn = 0;
            for (std::size_t i = 0; i < d; ++i) {
                dot += q[i] * g[i];
                qn += q[i] * q[i];
                gn += g[i] * g[i];
            }
            return dot / (std::sqrt(qn) * std::sqrt(gn));
        };
        for (std::size_t i = 1; i < n; ++i)
            CHECK(cosine(gallery[order[i - 1]]) >= cosine(gallery[order[i]]));
    }
}

TEST_CASE("metrics on forced rankings") {
    SUBCASE("perfect ranking") {
        MetricsReport rep = compute_map_cmc({{0, 1, 2, 3}}, {5}, {5, 5, 1, 2});
        CHECK(rep.mean_ap == doctest::Approx(1.0));
        CHECK(rep.cmc_at(1) == doctest::Approx(1.0));
    }

    SUBCASE("single positive at rank 2 of 10") {
        std::vector<std::size_t> order{9, 0, 1, 2, 3, 4, 5, 6, 7, 8};
        std::vector<int> glabels{7, 0, 0, 0, 0, 0, 0, 0, 0, 1};
        // gallery item 0 has the query label and lands at rank 2
        MetricsReport rep = compute_map_cmc({order}, {7}, glabels);
        CHECK(rep.mean_ap == doctest::Approx(0.5));
        CHECK(rep.cmc_at(1) == doctest::Approx(0.0));
        CHECK(rep.cmc_at(5) == doctest::Approx(1.0));
    }

    SUBCASE("queries without relevant items are excluded and counted") {
        MetricsReport rep = compute_map_cmc({{0, 1}, {0, 1}}, {3, 9}, {3, 2});
        CHECK(rep.excluded == 1);
        CHECK(rep.per_query_ap[1] == -1.0);
        CHECK(rep.mean_ap == doctest::Approx(1.0));
    }
}

TEST_CASE("mAP equals the brute-force oracle on random assignments") {
    Rng rng(13);
    const std::size_t queries = 50, gallery_n = 20;
    std::vector<int> glabels(gallery_n);
    for (int& l : glabels) l = static_cast<int>(rng.below(5));
    std::vector<int> qlabels(queries);
    std::vector<std::vector<std::size_t>> rankings;
    for (std::size_t q = 0; q < queries; ++q) {
        qlabels[q] = static_cast<int>(rng.below(5));
        std::vector<std::size_t> order(gallery_n);
        for (std::size_t i = 0; i < gallery_n; ++i) order[i] = i;
        shuffle(order, rng);
        rankings.push_back(order);
    }
    MetricsReport rep = compute_map_cmc(rankings, qlabels, glabels);

    double total = 0.0;
    std::size_t valid = 0;
    for (std::size_t q = 0; q < queries; ++q) {
        std::vector<bool> rel(gallery_n);
        for (std::size_t g = 0; g < gallery_n; ++g) rel[g] = glabels[g] == qlabels[q];
        const double ap = oracle::average_precision(rankings[q], rel);
        if (ap < 0) continue;
        CHECK(std::abs(rep.per_query_ap[q] - ap) <= 1e-12);
        total += ap;
        ++valid;
    }
    CHECK(std::abs(rep.mean_ap - total / valid) <= 1e-12);
}

TEST_CASE("metrics invariances") {
    Rng rng(17);
    const std::size_t gallery_n = 12;
    std::vector<int> glabels(gallery_n);
    for (int& l : glabels) l = static_cast<int>(rng.below(3));
    std::vector<std::vector<double>> gallery(gallery_n, std::vector<double>(4));
    for (auto& g : gallery)
        for (double& v : g) v = rng.uniform(-1, 1);
    std::vector<double> q(4);
    for (double& v : q) v = rng.uniform(-1, 1);

    SUBCASE("gallery permutation does not change the metrics") {
        auto rep1 = compute_map_cmc({rank_gallery(q, gallery)}, {glabels[0]}, glabels);

        std::vector<std::size_t> perm(gallery_n);
        for (std::size_t i = 0; i < gallery_n; ++i) perm[i] = i;
        shuffle(perm, rng);
        std::vector<std::vector<double>> shuffled(gallery_n);
        std::vector<int> plabels(gallery_n);
        for (std::size_t i = 0; i < gallery_n; ++i) {
            shuffled[i] = gallery[perm[i]];
            plabels[i] = glabels[perm[i]];
        }
        auto rep2 = compute_map_cmc({rank_gallery(q, shuffled)}, {glabels[0]}, plabels);
        CHECK(rep1.mean_ap == doctest::Approx(rep2.mean_ap).epsilon(1e-12));
        CHECK(rep1.cmc_at(1) == doctest::Approx(rep2.cmc_at(1)).epsilon(1e-12));
    }

    SUBCASE("global positive rescaling does not change the ranking") {
        auto base = rank_gallery(q, gallery);
        std::vector<std::vector<double>> scaled = gallery;
        for (auto& g : scaled)
            for (double& v : g) v *= 37.5;
        std::vector<double> qs = q;
        for (double& v : qs) v *= 0.004;
        auto again = rank_gallery(qs, scaled);
        CHECK(base == again);
    }

    SUBCASE("CMC is non-decreasing in rank") {
        auto rep = compute_map_cmc({rank_gallery(q, gallery)}, {glabels[0]}, glabels);
        for (std::size_t r = 1; r < rep.cmc.size(); ++r) CHECK(rep.cmc[r] >= rep.cmc[r - 1]);
    }
}

TEST_CASE("corpus round-trips through disk with a stable manifest") {
    SynthSpec spec = tiny_spec();
    Dataset d = generate(spec, 21);
    const std::string dir = "/tmp/tcl_test_corpus";
    std::filesystem::remove_all(dir);
    save_dataset(d, dir);
    const std::uint64_t manifest1 = file_digest(dir + "/manifest.txt");

    Dataset back = load_dataset(dir);
    REQUIRE(back.clips.size() == d.clips.size());
    CHECK(back.seed == d.seed);
    CHECK(back.spec.num_identities == spec.num_identities);
    CHECK(dataset_digest(back) == dataset_digest(d));
    CHECK(back.clips[1].role == d.clips[1].role);

    std::filesystem::remove_all(dir);
    save_dataset(d, dir);
    CHECK(file_digest(dir + "/manifest.txt") == manifest1);
    std::filesystem::remove_all(dir);
}
