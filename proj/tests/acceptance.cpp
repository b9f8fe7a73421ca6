#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>

#include "oracles.hpp"
#include "tcl/commands.hpp"
#include "tcl/grad_check.hpp"
#include "tcl/ops.hpp"
#include "tcl/pipeline.hpp"
#include "tcl/tensor_io.hpp"

using namespace tcl;

// Acceptance gate: one test case per criterion, one pass/fail line each.

namespace {

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void report(int criterion, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
    std::fflush(stdout);
}

// the fixed desk-scale ablation protocol: default corpus, reduced backbone,
// 40 epochs of Adam at 3e-3 in 16-clip batches
RunConfig ablation_protocol() {
    RunConfig cfg;
    cfg.stage_channels = {8, 16, 32};
    cfg.blocks_per_stage = 1;
    cfg.head_channels = 64;
    cfg.epochs = 40;
    cfg.lr = 3e-3;
    cfg.lr_step = 40;
    cfg.batch_p = 4;
    cfg.batch_k = 4;
    cfg.seed = 500;
    return cfg;
}

} // namespace

TEST_CASE("criterion 1: block selection matches the exhaustive oracle") {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(1001);
    std::size_t mismatches = 0;
    const int trials = 500;
    for (int trial = 0; trial < trials; ++trial) {
        const std::size_t h = 2 + rng.below(20), w = 2 + rng.below(14);
        SeoConfig cfg;
        cfg.block_h = 1 + static_cast<int>(rng.below(h));
        cfg.block_w = 1 + static_cast<int>(rng.below(w));
        cfg.stride_h = 1 + static_cast<int>(rng.below(3));
        cfg.stride_w = 1 + static_cast<int>(rng.below(3));
        // constant maps force the row-major tie-break through the oracle too
        Tensor r = trial % 17 == 0 ? Tensor::full({h, w}, 0.5)
                                   : Tensor::uniform({h, w}, rng, -2, 2);
        BinaryMask m = block_binarize(r, cfg);
        auto [br, bc] = oracle::best_block(r.data(), h, w, cfg.block_h, cfg.block_w, cfg.stride_h,
                                           cfg.stride_w);
        if (m.block_row != br || m.block_col != bc) ++mismatches;
        if (m.zero_count() != static_cast<std::size_t>(cfg.block_h * cfg.block_w)) ++mismatches;
    }
    const double secs = seconds_since(t0);
    const bool pass = mismatches == 0 && secs < 10.0;
    report(1, pass,
           std::to_string(trials) + " random maps, " + std::to_string(mismatches) +
               " mismatches, " + std::to_string(secs).substr(0, 4) + "s (< 10s)");
    CHECK(mismatches == 0);
    CHECK(secs < 10.0);
}

TEST_CASE("criterion 2: gradient fidelity of primitives, TSE and TSB") {
    const auto t0 = std::chrono::steady_clock::now();
    double worst_prim = 0.0, worst_tse = 0.0, worst_tsb = 0.0;

    for (std::uint64_t seed : {2001ull, 2002ull, 2003ull}) {
        Rng rng(seed);
        // (a) primitives
        {
            Tensor x = Tensor::uniform({2, 6, 4}, rng, -1, 1);
            Tensor k = Tensor::uniform({3, 2, 3, 3}, rng, -0.5, 0.5);
            Tensor gamma = Tensor::uniform({3}, rng, 0.5, 1.5);
            Tensor beta = Tensor::uniform({3}, rng, -0.5, 0.5);
            Tensor rm = Tensor::uniform({3, 6, 4}, rng, -1, 1);
            BnStats stats{{0, 0, 0}, {1, 1, 1}};
            worst_prim = std::max(
                worst_prim,
                grad_check_params([&] { return sum_all(mul(conv2d(x, k, 1, 1), rm)); }, {x, k}));
            auto bn_fn = [&] {
                Tensor b = reshape(conv2d(x, k, 1, 1), {1, 3, 6, 4});
                b = batchnorm(b, gamma, beta, stats, BnMode::train, 0.1, 1e-5, false);
                return sum_all(mul(reshape(b, {3, 6, 4}), rm));
            };
            worst_prim = std::max(worst_prim, grad_check_params(bn_fn, {x, gamma, beta}, 1e-4));
            Tensor v = Tensor::uniform({7}, rng, -2, 2);
            Tensor rv = Tensor::uniform({7}, rng, -1, 1);
            worst_prim = std::max(
                worst_prim,
                grad_check_params([&] { return sum_all(mul(softmax(v, 0), rv)); }, {v}));
            Tensor r2 = Tensor::uniform({2}, rng, -1, 1);
            worst_prim = std::max(
                worst_prim,
                grad_check_params([&] { return sum_all(mul(global_avg_pool(x), r2)); }, {x}));
        }
        // (b) full TSE forward with N = 2. Frames carry one clearly salient
        // patch so the selected block is stable under the probe steps; the
        // selection itself is intentionally non-differentiable.
        {
            BackboneConfig bc;
            bc.stage_channels = {5};
            bc.head_channels = 6;
            Rng lr = rng.fork(7);
            LearnerStack ls = make_learners(bc, 2, lr);
            SeoConfig sc;
            sc.block_h = 2;
            sc.block_w = 3;
            Tensor w = Tensor::uniform({6, 5}, rng, -0.4, 0.4);
            auto salient_map = [&](std::size_t hot_i, std::size_t hot_j) {
                Tensor t = Tensor::uniform({6, 4, 5}, rng, 0.0, 0.3);
                for (std::size_t di = 0; di < 2; ++di)
                    for (std::size_t dj = 0; dj < 2; ++dj)
                        for (std::size_t d = 0; d < 5; ++d)
                            t.data_mut()[((hot_i + di) * 4 + hot_j + dj) * 5 + d] +=
                                2.0 + 0.2 * rng.uniform();
                return t;
            };
            const std::size_t hot_i = 1 + rng.below(3), hot_j = rng.below(2);
            std::vector<Tensor> segment{salient_map(hot_i, hot_j), salient_map(hot_i, hot_j)};
            Tensor r0 = Tensor::uniform({6}, rng, -1, 1);
            Tensor r1 = Tensor::uniform({6}, rng, -1, 1);
            auto fn = [&] {
                TseResult out = tse_forward(segment, ls, w, sc);
                return add(sum_all(mul(out.features[0], r0)), sum_all(mul(out.features[1], r1)));
            };
            std::vector<Tensor> params{w,
                                       segment[0],
                                       segment[1],
                                       ls.trunk.weight,
                                       ls.trunk.bias,
                                       ls.heads[0].weight,
                                       ls.heads[1].weight};
            worst_tse = std::max(worst_tse, grad_check_params(fn, params, 1e-5, 60, seed));
        }
        // (c) full TSB propagate; clip frames are correlated like real video
        {
            TsbModule tsb(4, {});
            Tensor base = Tensor::uniform({3, 2, 4}, rng, 0.2, 1.0);
            auto jitter = [&] {
                Tensor t = base.clone();
                for (double& v : t.data_mut()) v += rng.uniform(-0.3, 0.3);
                return t;
            };
            Tensor q = jitter();
            Tensor mem = stack({jitter(), jitter()});
            Tensor r = Tensor::uniform({3, 2, 4}, rng, -1, 1);
            auto fn = [&] { return sum_all(mul(tsb.propagate(q, mem, BnMode::eval, false), r)); };
            worst_tsb = std::max(worst_tsb,
                                 grad_check_params(fn, {q, mem, tsb.bn.gamma, tsb.bn.beta}, 1e-5));
            std::vector<Tensor> clip{q, take_index(mem, 0), take_index(mem, 1)};
            auto fc = [&] {
                std::vector<Tensor> out = tsb.forward(clip, BnMode::train, false);
                return sum_all(mul(out[0], r));
            };
            worst_tsb = std::max(worst_tsb,
                                 grad_check_params(fc, {clip[1], tsb.bn.gamma, tsb.bn.beta}, 1e-5));
        }
    }
    const double secs = seconds_since(t0);
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "max rel err: primitives %.2e, TSE %.2e, TSB %.2e over 3 seeds, %.1fs (< 60s)",
                  worst_prim, worst_tse, worst_tsb, secs);
    const bool pass = worst_prim < 1e-4 && worst_tse < 1e-4 && worst_tsb < 1e-4 && secs < 60.0;
    report(2, pass, detail);
    CHECK(worst_prim < 1e-4);
    CHECK(worst_tse < 1e-4);
    CHECK(worst_tsb < 1e-4);
    CHECK(secs < 60.0);
}

TEST_CASE("criterion 3: mechanism invariants") {
    bool gate_zero = true, erased_invariant = true, attention_sums = true, tsb_equivariant = true,
         baseline_bitwise = true;
    Rng rng(3001);

    // gate exactly zero on the fused region; features ignore scribbles there
    {
        BackboneConfig bc;
        bc.stage_channels = {6};
        bc.head_channels = 8;
        Rng lr = rng.fork(3);
        LearnerStack ls = make_learners(bc, 3, lr);
        SeoConfig sc;
        sc.n_learners = 3;
        sc.block_h = 2;
        sc.block_w = 3;
        Tensor w = Tensor::uniform({8, 6}, rng, -0.3, 0.3);
        std::vector<Tensor> segment;
        for (int i = 0; i < 3; ++i) segment.push_back(Tensor::uniform({8, 6, 6}, rng, 0, 1));
        TseResult r = tse_forward(segment, ls, w, sc);
        for (std::size_t n = 1; n < 3; ++n) {
            const SeoArtifacts& art = r.artifacts[n];
            for (std::size_t i = 0; i < 8; ++i)
                for (std::size_t j = 0; j < 6; ++j)
                    if (art.fused.erased_at(i, j) && art.gate.at(i, j) != 0.0) gate_zero = false;
        }
        const SeoArtifacts& last = r.artifacts[2];
        Tensor vandalized = segment[2].clone();
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t j = 0; j < 6; ++j)
                if (last.fused.erased_at(i, j))
                    for (std::size_t d = 0; d < 6; ++d)
                        vandalized.data_mut()[(i * 6 + j) * 6 + d] = rng.uniform(-50, 50);
        Tensor redone = ls.feature(erase(vandalized, last.gate), 2);
        for (std::size_t i = 0; i < redone.size(); ++i)
            if (redone[i] != r.features[2][i]) erased_invariant = false;
    }

    // attention rows sum to one
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t m = 1 + rng.below(6), d = 2 + rng.below(6);
        Tensor q = Tensor::uniform({d}, rng, -1, 1);
        Tensor mem = Tensor::uniform({m, d}, rng, -1, 1);
        Tensor a = attention_weights(q, mem, rng.uniform(0.5, 24.0));
        double total = 0.0;
        for (std::size_t i = 0; i < m; ++i) total += a[i];
        if (std::abs(total - 1.0) >= 1e-9) attention_sums = false;
    }

    // TSB permutation equivariance
    {
        TsbModule tsb(5, {});
        std::vector<Tensor> clip;
        for (int i = 0; i < 4; ++i) clip.push_back(Tensor::uniform({4, 3, 5}, rng, -1, 1));
        std::vector<Tensor> fwd = tsb.forward(clip, BnMode::train, false);
        const std::vector<std::size_t> perm{2, 0, 3, 1};
        std::vector<Tensor> shuffled;
        for (std::size_t p : perm) shuffled.push_back(clip[p]);
        std::vector<Tensor> out = tsb.forward(shuffled, BnMode::train, false);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < clip[0].size(); ++j)
                if (std::abs(out[i][j] - fwd[perm[i]][j]) > 1e-12) tsb_equivariant = false;
    }

    // N=1, no TSB collapses to the straight-line baseline bitwise
    {
        ModelConfig mc;
        mc.backbone.stage_channels = {4, 8};
        mc.backbone.blocks_per_stage = 1;
        mc.backbone.in_h = 16;
        mc.backbone.in_w = 8;
        mc.backbone.head_channels = 12;
        mc.seo.n_learners = 1;
        mc.use_tsb = false;
        mc.num_classes = 2;
        Model model(mc, 3003);
        std::vector<Tensor> clip;
        Rng cr = rng.fork(9);
        for (int i = 0; i < 3; ++i) clip.push_back(Tensor::uniform({1, 16, 8}, cr, 0, 1));
        VideoDescriptor d = model.descriptor(clip, BnMode::eval);

        Tensor pooled;
        for (std::size_t t = 0; t < clip.size(); ++t) {
            Tensor x = clip[t];
            for (const auto& stage : model.backbone.stages)
                for (const ConvLayer& block : stage)
                    x = relu(add_chanvec(conv2d(x, block.weight, block.stride, block.pad),
                                         block.bias));
            x = relu(add_chanvec(conv2d(x, model.learners.trunk.weight, 1, 1),
                                 model.learners.trunk.bias));
            x = relu(add_chanvec(conv2d(x, model.learners.heads[0].weight, 1, 1),
                                 model.learners.heads[0].bias));
            Tensor f = global_avg_pool(x);
            pooled = t == 0 ? f : add(pooled, f);
        }
        Tensor vhat = l2_normalize_rows(scale(pooled, 1.0 / 3.0));
        if (d.test_vec.size() != vhat.size()) baseline_bitwise = false;
        for (std::size_t i = 0; i < vhat.size() && baseline_bitwise; ++i)
            if (d.test_vec[i] != vhat[i]) baseline_bitwise = false;
    }

    const bool pass =
        gate_zero && erased_invariant && attention_sums && tsb_equivariant && baseline_bitwise;
    report(3, pass,
           std::string("gate-zero ") + (gate_zero ? "ok" : "FAIL") + ", erased-invariance " +
               (erased_invariant ? "ok" : "FAIL") + ", attention-sums " +
               (attention_sums ? "ok" : "FAIL") + ", tsb-equivariance " +
               (tsb_equivariant ? "ok" : "FAIL") + ", baseline-bitwise " +
               (baseline_bitwise ? "ok" : "FAIL"));
    CHECK(gate_zero);
    CHECK(erased_invariant);
    CHECK(attention_sums);
    CHECK(tsb_equivariant);
    CHECK(baseline_bitwise);
}

TEST_CASE("criterion 4: ablation directions on the default corpus") {
    RunConfig cfg = ablation_protocol();
    Dataset data = generate(cfg.synth_spec(), cfg.seed);

    const int n_seeds = 5;
    std::vector<AblationRun> runs =
        run_ablation(data, cfg, {"base", "tse_wo_seo", "tse", "tclnet"}, n_seeds, nullptr);

    std::map<std::string, std::vector<double>> map_of;
    double max_secs = 0.0;
    for (const AblationRun& r : runs) {
        map_of[r.arm].push_back(r.metrics.mean_ap);
        max_secs = std::max(max_secs, r.seconds);
        std::printf("    %-10s seed %llu  mAP %.4f  top1 %.4f  (%.0fs)\n", r.arm.c_str(),
                    static_cast<unsigned long long>(r.seed), r.metrics.mean_ap,
                    r.metrics.cmc_at(1), r.seconds);
    }

    int tse_beats_wo_seo = 0, tse_beats_base = 0;
    for (int s = 0; s < n_seeds; ++s) {
        if (map_of["tse"][s] > map_of["tse_wo_seo"][s]) ++tse_beats_wo_seo;
        if (map_of["tse"][s] > map_of["base"][s]) ++tse_beats_base;
    }
    auto mean = [](const std::vector<double>& v) {
        double acc = 0.0;
        for (double x : v) acc += x;
        return acc / v.size();
    };
    const double tclnet_mean = mean(map_of["tclnet"]);
    const double tse_mean = mean(map_of["tse"]);

    char detail[240];
    std::snprintf(detail, sizeof(detail),
                  "tse>wo_seo %d/5, tse>base %d/5, tclnet mean %.4f vs tse mean %.4f, slowest "
                  "run %.0fs (< 600s)",
                  tse_beats_wo_seo, tse_beats_base, tclnet_mean, tse_mean, max_secs);
    const bool pass = tse_beats_wo_seo >= 4 && tse_beats_base >= 4 && tclnet_mean >= tse_mean &&
                      max_secs < 600.0;
    report(4, pass, detail);
    CHECK(tse_beats_wo_seo >= 4);
    CHECK(tse_beats_base >= 4);
    CHECK(tclnet_mean >= tse_mean);
    CHECK(max_secs < 600.0);
}

TEST_CASE("criterion 5: hyperparameter defaults echo the training protocol") {
    RunConfig cfg;
    ModelConfig mc = cfg.model_config();
    TrainConfig tc = cfg.train_config();

    const bool pass = cfg.n_learners == 2 && cfg.block_h == 3 &&
                      mc.seo.resolved_block_w(mc.backbone.out_w()) == mc.backbone.out_w() &&
                      mc.backbone.out_w() == 8 && cfg.stride_h == 1 && cfg.stride_w == 1 &&
                      tc.lr == 3e-4 && tc.lr_decay == 0.1 && tc.lr_step == 40 &&
                      lr_at(tc, 0) == 3e-4 && std::abs(lr_at(tc, 40) - 3e-5) < 1e-18 &&
                      std::abs(lr_at(tc, 80) - 3e-6) < 1e-19 &&
                      cfg.batch_p * cfg.batch_k == 32 && cfg.train_frames == 4;
    report(5, pass,
           "N=2, h_e=3, w_e=map width (8), strides 1, lr 3e-4 with x0.1 at 40/80/120, batch 32, "
           "4 frames per training clip");
    CHECK(pass);
}

TEST_CASE("criterion 6: candidate-position arithmetic for the paper geometry") {
    SeoConfig cfg;
    cfg.block_h = 3;
    cfg.block_w = 8;
    const std::size_t n = n_block_positions(16, 8, cfg);
    report(6, n == 14, "16x8 map, 3x8 block, stride 1 -> " + std::to_string(n) + " positions");
    CHECK(n == 14);
}

TEST_CASE("criterion 7: mAP agrees with the brute-force oracle") {
    Rng rng(7001);
    const std::size_t queries = 50, gallery_n = 24;
    std::vector<int> glabels(gallery_n);
    for (int& l : glabels) l = static_cast<int>(rng.below(6));
    std::vector<int> qlabels(queries);
    std::vector<std::vector<std::size_t>> rankings;
    for (std::size_t q = 0; q < queries; ++q) {
        qlabels[q] = static_cast<int>(rng.below(6));
        std::vector<std::size_t> order(gallery_n);
        for (std::size_t i = 0; i < gallery_n; ++i) order[i] = i;
        shuffle(order, rng);
        rankings.push_back(order);
    }
    MetricsReport rep = compute_map_cmc(rankings, qlabels, glabels);

    double total = 0.0;
    std::size_t valid = 0;
    double worst = 0.0;
    for (std::size_t q = 0; q < queries; ++q) {
        std::vector<bool> rel(gallery_n);
        for (std::size_t g = 0; g < gallery_n; ++g) rel[g] = glabels[g] == qlabels[q];
        const double ap = oracle::average_precision(rankings[q], rel);
        if (ap < 0) continue;
        worst = std::max(worst, std::abs(rep.per_query_ap[q] - ap));
        total += ap;
        ++valid;
    }
    worst = std::max(worst, std::abs(rep.mean_ap - total / valid));
    char detail[120];
    std::snprintf(detail, sizeof(detail), "50 random assignments, max |delta| %.2e (< 1e-12)",
                  worst);
    report(7, worst < 1e-12, detail);
    CHECK(worst < 1e-12);
}
