#include "tcl/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "tcl/ops.hpp"
#include "tcl/tensor_io.hpp"

namespace fs = std::filesystem;

namespace tcl {

std::vector<std::vector<Tensor>> segment_divide(const std::vector<Tensor>& maps, std::size_t n) {
    if (n == 0) throw PreconditionError("segment_divide: segment length must be positive");
    if (maps.empty()) throw PreconditionError("segment_divide: empty clip");
    if (maps.size() % n != 0)
        throw PreconditionError("segment_divide: " + std::to_string(maps.size()) +
                                " maps do not divide into segments of " + std::to_string(n) +
                                "; pad or drop frames before calling");
    std::vector<std::vector<Tensor>> segments;
    for (std::size_t k = 0; k < maps.size(); k += n)
        segments.emplace_back(maps.begin() + k, maps.begin() + k + n);
    return segments;
}

std::string ModelConfig::signature() const {
    std::ostringstream os;
    os << "channels=";
    for (std::size_t c : backbone.stage_channels) os << c << ",";
    os << ";blocks=" << backbone.blocks_per_stage << ";in=" << backbone.in_channels << "x"
       << backbone.in_h << "x" << backbone.in_w << ";d1=" << backbone.head_channels
       << ";n=" << seo.n_learners << ";bh=" << seo.block_h << ";bw=" << seo.block_w
       << ";sh=" << seo.stride_h << ";sw=" << seo.stride_w << ";seo=" << use_seo
       << ";tsb=" << use_tsb << ";tsb_stage=" << tsb.stage << ";tau=" << tsb.temperature
       << ";classes=" << num_classes;
    return os.str();
}

Model::Model(ModelConfig cfg_, std::uint64_t seed) : cfg(std::move(cfg_)) {
    if (cfg.seo.n_learners < 1) throw PreconditionError("model: need at least one learner");
    Rng master(seed);
    Rng brng = master.fork(1);
    backbone = Backbone(cfg.backbone, brng);
    if (cfg.use_tsb) {
        const int stage = cfg.tsb.stage;
        if (stage < 1 || stage > static_cast<int>(cfg.backbone.stage_channels.size()))
            throw PreconditionError("model: tsb stage " + std::to_string(stage) +
                                    " outside the backbone");
        tsb = std::make_unique<TsbModule>(cfg.backbone.stage_channels[stage - 1], cfg.tsb);
    }
    Rng lrng = master.fork(2);
    learners = make_learners(cfg.backbone, cfg.seo.n_learners, lrng);

    const std::size_t d1 = cfg.backbone.head_channels;
    const std::size_t d = cfg.backbone.out_channels();
    // Non-negative projection init: features are post-relu, so this makes
    // the correlation peak on the strongest activations from the first step,
    // which is where the erased block belongs. A sign-symmetric init leaves
    // the peak location to chance until w has trained. The 1/D1 scale keeps
    // the summed projection small enough that the gate softmax starts soft.
    Rng wrng = master.fork(3);
    proj_w = Tensor::uniform({d1, d}, wrng, 0.0, 2.0 / static_cast<double>(d1))
                 .set_requires_grad(true);

    for (int i = 0; i < cfg.seo.n_learners; ++i) {
        Rng hrng = master.fork(100 + i);
        heads.push_back(Linear::make(cfg.num_classes, d1, hrng));
    }
}

VideoDescriptor Model::descriptor(const std::vector<Tensor>& frames, BnMode mode,
                                  bool allow_truncate, bool update_running,
                                  std::vector<std::vector<SeoArtifacts>>* artifacts,
                                  std::vector<std::vector<double>>* tsb_attention) {
    if (frames.empty()) throw PreconditionError("descriptor: empty clip");
    const std::size_t n = static_cast<std::size_t>(cfg.seo.n_learners);
    std::vector<Tensor> clip = frames;
    if (clip.size() % n != 0) {
        if (!allow_truncate)
            throw PreconditionError("descriptor: clip length " + std::to_string(clip.size()) +
                                    " not divisible by " + std::to_string(n) +
                                    " learners; pad or drop frames");
        const std::size_t keep = (clip.size() / n) * n;
        if (keep == 0)
            throw PreconditionError("descriptor: clip shorter than one segment of " +
                                    std::to_string(n));
        clip.resize(keep);
    }

    std::vector<Tensor> maps =
        backbone.forward_clip(clip, tsb.get(), mode, update_running, nullptr, tsb_attention);
    return finalize_descriptor(maps, artifacts);
}

VideoDescriptor Model::finalize_descriptor(const std::vector<Tensor>& maps,
                                           std::vector<std::vector<SeoArtifacts>>* artifacts) {
    const std::size_t n = static_cast<std::size_t>(cfg.seo.n_learners);
    std::vector<std::vector<Tensor>> segments = segment_divide(maps, n);
    const double inv_l = 1.0 / static_cast<double>(segments.size());

    if (artifacts) artifacts->clear();
    std::vector<Tensor> pooled(n);
    for (std::size_t k = 0; k < segments.size(); ++k) {
        TseResult r = tse_forward(segments[k], learners, proj_w, cfg.seo, cfg.use_seo);
        if (artifacts) artifacts->push_back(std::move(r.artifacts));
        for (std::size_t i = 0; i < n; ++i)
            pooled[i] = k == 0 ? r.features[i] : add(pooled[i], r.features[i]);
    }

    VideoDescriptor out;
    std::vector<Tensor> normalized;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor v = scale(pooled[i], inv_l);
        normalized.push_back(l2_normalize_rows(v));
        out.learner_vecs.push_back(std::move(v));
    }
    out.test_vec = concat_vecs(normalized);
    return out;
}

std::vector<VideoDescriptor> Model::batch_descriptors(
    const std::vector<std::vector<Tensor>>& clips, BnMode mode, bool update_running) {
    std::vector<VideoDescriptor> out;
    out.reserve(clips.size());
    if (!tsb) {
        for (const auto& frames : clips) out.push_back(descriptor(frames, mode));
        return out;
    }

    const std::size_t n = static_cast<std::size_t>(cfg.seo.n_learners);
    const std::size_t stage = static_cast<std::size_t>(tsb->cfg.stage);

    // run every clip up to the TSB boundary and pool the attention
    // descriptors into one BN batch
    std::vector<std::vector<Tensor>> pre_hwd(clips.size());
    std::vector<Tensor> all_rows;
    std::vector<std::size_t> row_count(clips.size(), 0);
    for (std::size_t c = 0; c < clips.size(); ++c) {
        if (clips[c].empty() || clips[c].size() % n != 0)
            throw PreconditionError("batch_descriptors: clip length must be a positive multiple "
                                    "of the learner count");
        backbone.check_frames(clips[c]);
        std::vector<Tensor> maps = backbone.run_stages(clips[c], 0, stage);
        std::vector<Tensor>& hwd = pre_hwd[c];
        hwd.reserve(maps.size());
        for (const Tensor& m : maps) hwd.push_back(permute(m, {1, 2, 0}));
        std::vector<Tensor> rows = tsb->memory_descriptors(hwd);
        row_count[c] = rows.size();
        for (Tensor& r : rows) all_rows.push_back(std::move(r));
    }

    std::vector<std::vector<Tensor>> normalized(clips.size());
    if (!all_rows.empty()) {
        Tensor normed = tsb->bn(stack(all_rows), mode, update_running);
        std::size_t at = 0;
        for (std::size_t c = 0; c < clips.size(); ++c)
            for (std::size_t i = 0; i < row_count[c]; ++i)
                normalized[c].push_back(take_index(normed, at++));
    }

    for (std::size_t c = 0; c < clips.size(); ++c) {
        std::vector<Tensor> enhanced = row_count[c] == 0
                                           ? pre_hwd[c]
                                           : tsb->apply_rows(pre_hwd[c], normalized[c]);
        std::vector<Tensor> chw;
        chw.reserve(enhanced.size());
        for (const Tensor& m : enhanced) chw.push_back(permute(m, {2, 0, 1}));
        std::vector<Tensor> maps = backbone.run_stages(chw, stage, backbone.stages.size());
        for (Tensor& m : maps) m = permute(m, {1, 2, 0});
        out.push_back(finalize_descriptor(maps, nullptr));
    }
    return out;
}

VideoDescriptor video_features(Model& model, const VideoClip& clip, BnMode mode,
                               bool allow_truncate) {
    return model.descriptor(clip.frames, mode, allow_truncate, false);
}

void Model::visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (std::size_t s = 0; s < backbone.stages.size(); ++s)
        for (std::size_t b = 0; b < backbone.stages[s].size(); ++b) {
            const std::string base =
                "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
            fn(base + ".weight", backbone.stages[s][b].weight);
            fn(base + ".bias", backbone.stages[s][b].bias);
        }
    if (tsb) {
        fn("tsb.bn.gamma", tsb->bn.gamma);
        fn("tsb.bn.beta", tsb->bn.beta);
    }
    fn("learners.trunk.weight", learners.trunk.weight);
    fn("learners.trunk.bias", learners.trunk.bias);
    for (std::size_t i = 0; i < learners.heads.size(); ++i) {
        const std::string base = "learners.head" + std::to_string(i);
        fn(base + ".weight", learners.heads[i].weight);
        fn(base + ".bias", learners.heads[i].bias);
    }
    fn("seo.w", proj_w);
    for (std::size_t i = 0; i < heads.size(); ++i) {
        const std::string base = "heads." + std::to_string(i);
        fn(base + ".weight", heads[i].weight);
        fn(base + ".bias", heads[i].bias);
    }
}

void Model::visit_buffers(const std::function<void(const std::string&, std::vector<double>&)>& fn) {
    if (tsb) {
        fn("tsb.bn.running_mean", tsb->bn.stats.mean);
        fn("tsb.bn.running_var", tsb->bn.stats.var);
    }
}

std::vector<std::pair<std::string, Tensor>> Model::named_params() {
    std::vector<std::pair<std::string, Tensor>> out;
    visit_params([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
    return out;
}

std::size_t Model::param_count() {
    std::size_t n = 0;
    visit_params([&](const std::string&, Tensor& t) { n += t.size(); });
    return n;
}

std::uint64_t Model::model_digest() const { return fnv1a64(cfg.signature()); }

Tensor ce_heads_loss(const std::vector<VideoDescriptor>& batch, const std::vector<int>& labels,
                     const std::vector<Linear>& heads) {
    if (batch.empty()) throw PreconditionError("ce_heads_loss: empty batch");
    if (labels.size() != batch.size())
        throw PreconditionError("ce_heads_loss: one label per descriptor required");
    for (const VideoDescriptor& d : batch)
        if (d.learner_vecs.size() != heads.size())
            throw PreconditionError("ce_heads_loss: descriptor has " +
                                    std::to_string(d.learner_vecs.size()) +
                                    " vectors but there are " + std::to_string(heads.size()) +
                                    " classifiers");
    Tensor total;
    for (std::size_t i = 0; i < heads.size(); ++i) {
        std::vector<Tensor> rows;
        rows.reserve(batch.size());
        for (const VideoDescriptor& d : batch) rows.push_back(d.learner_vecs[i]);
        Tensor ce = cross_entropy_logits(heads[i](stack(rows)), labels);
        total = i == 0 ? ce : add(total, ce);
    }
    return total;
}

TripletResult batch_hard_triplet_loss(const std::vector<Tensor>& test_vecs,
                                      const std::vector<int>& labels, double margin) {
    if (test_vecs.empty()) throw PreconditionError("triplet: empty batch");
    if (labels.size() != test_vecs.size())
        throw PreconditionError("triplet: one label per vector required");
    const std::size_t b = test_vecs.size();

    Tensor vn = l2_normalize_rows(stack(test_vecs));
    Tensor gram = matmul(vn, transpose(vn));
    Tensor dmat = sqrt_shift(relu(add_scalar(scale(gram, -2.0), 2.0)), 1e-24); // [B,B]

    // batch-hard selection on forward values; ties keep the smallest index
    const auto& dv = dmat.data();
    const std::size_t npos = static_cast<std::size_t>(-1);
    std::vector<std::size_t> pos(b, npos), neg(b, npos);
    std::vector<bool> active(b, false);
    double total = 0.0;
    std::size_t anchors = 0;
    for (std::size_t a = 0; a < b; ++a) {
        double hp = -1.0, hn = -1.0;
        for (std::size_t o = 0; o < b; ++o) {
            if (o == a) continue;
            const double d = dv[a * b + o];
            if (labels[o] == labels[a]) {
                if (d > hp) {
                    hp = d;
                    pos[a] = o;
                }
            } else if (hn < 0.0 || d < hn) {
                hn = d;
                neg[a] = o;
            }
        }
        if (pos[a] == npos || neg[a] == npos) {
            pos[a] = neg[a] = npos;
            continue;
        }
        const double hinge = hp - hn + margin;
        if (hinge > 0.0) {
            total += hinge;
            active[a] = true;
        }
        ++anchors;
    }

    TripletResult out;
    out.no_valid_anchor = anchors == 0;
    const double value = anchors == 0 ? 0.0 : total / static_cast<double>(anchors);
    out.loss = Tensor::scalar(value);

    if (Tape::active() && dmat.requires_grad() && anchors > 0) {
        out.loss.set_requires_grad(true);
        auto dh = dmat.handle();
        const double inv = 1.0 / static_cast<double>(anchors);
        Tape::active()->push(
            out.loss.handle(),
            [dh, pos, neg, active, inv, b, npos](const std::vector<double>& g, Tape::GradMap& m) {
                auto& gd = Tape::slot(m, dh);
                for (std::size_t a = 0; a < b; ++a) {
                    if (pos[a] == npos || !active[a]) continue;
                    gd[a * b + pos[a]] += g[0] * inv;
                    gd[a * b + neg[a]] -= g[0] * inv;
                }
            });
    }
    return out;
}

Adam::Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(const std::vector<std::pair<std::string, Tensor>>& params, double lr,
                double weight_decay) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, param] : params) {
        Tensor p = param;
        if (!p.has_grad()) continue;
        // the SEO projection's norm acts as the gate temperature; decaying
        // it anneals the gate toward uniform and the block selection toward
        // noise, so it is exempt
        const double wd = name == "seo.w" ? 0.0 : weight_decay;
        Slot& s = state_[name];
        if (s.m.empty()) {
            s.m.assign(p.size(), 0.0);
            s.v.assign(p.size(), 0.0);
        }
        const auto& g = p.grad();
        auto& value = p.data_mut();
        for (std::size_t i = 0; i < value.size(); ++i) {
            s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
            s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            value[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd * value[i]);
        }
        p.zero_grad();
    }
}

double lr_at(const TrainConfig& cfg, int epoch) {
    const int drops = cfg.lr_step > 0 ? epoch / cfg.lr_step : 0;
    return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(drops));
}

namespace {

void dump_divergence_diagnostics(const std::string& out_dir, Model& model,
                                 const std::vector<const VideoClip*>& batch,
                                 const std::vector<std::size_t>& frame_picks_flat) {
    std::error_code ec;
    const fs::path dir = fs::path(out_dir) / "diagnostics";
    fs::create_directories(dir, ec);
    if (ec) return;
    std::ofstream note(dir / "divergence.txt");
    note << "loss became non-finite; last batch clips:\n";
    for (const VideoClip* c : batch)
        note << "  id=" << c->identity << " clip=" << c->clip_id << "\n";
    note << "sampled frame indices:";
    for (std::size_t f : frame_picks_flat) note << " " << f;
    note << "\n";
    if (batch.empty()) return;
    // artifacts of the first clip of the failing batch
    std::vector<std::vector<SeoArtifacts>> art;
    try {
        std::vector<Tensor> frames = batch[0]->frames;
        model.descriptor(frames, BnMode::eval, true, false, &art);
    } catch (...) {
        return;
    }
    for (std::size_t k = 0; k < art.size(); ++k)
        for (std::size_t f = 0; f < art[k].size(); ++f) {
            const std::string base =
                (dir / ("seg" + std::to_string(k) + "_frame" + std::to_string(f))).string();
            if (art[k][f].gate.defined()) save_tensor(base + "_gate.t64", art[k][f].gate);
            if (art[k][f].erased.defined()) save_tensor(base + "_erased.t64", art[k][f].erased);
        }
}

} // namespace

TrainResult train(const Dataset& data, const TrainConfig& cfg, Model* model_out) {
    std::vector<const VideoClip*> pool = data.training_clips();
    if (pool.empty()) throw PreconditionError("train: corpus has no training clips");
    if (cfg.train_frames < 1 || cfg.train_frames % cfg.model.seo.n_learners != 0)
        throw PreconditionError("train: train_frames must be a positive multiple of the learner "
                                "count");

    // dense class labels over the identities present in the training pool
    std::map<int, int> id_to_class;
    for (const VideoClip* c : pool) id_to_class.emplace(c->identity, 0);
    int next_class = 0;
    for (auto& [id, cls] : id_to_class) cls = next_class++;
    std::map<int, std::vector<std::size_t>> clips_of;
    for (std::size_t i = 0; i < pool.size(); ++i) clips_of[pool[i]->identity].push_back(i);

    ModelConfig mc = cfg.model;
    mc.num_classes = id_to_class.size();
    Model model(mc, Rng(cfg.seed).fork(11).next_u64());
    auto params = model.named_params();
    Adam opt;

    TrainResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(cfg, epoch);
        Rng erng = Rng(cfg.seed).fork(100000 + static_cast<std::uint64_t>(epoch));

        std::vector<int> ids;
        for (const auto& [id, cls] : id_to_class) ids.push_back(id);
        shuffle(ids, erng);

        double ce_sum = 0.0, tri_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < ids.size(); start += cfg.batch_p) {
            const std::size_t stop = std::min(ids.size(), start + cfg.batch_p);
            std::vector<const VideoClip*> batch;
            std::vector<int> labels;
            for (std::size_t i = start; i < stop; ++i) {
                std::vector<std::size_t> choice = clips_of[ids[i]];
                shuffle(choice, erng);
                for (int k = 0; k < cfg.batch_k; ++k) {
                    batch.push_back(pool[choice[k % choice.size()]]);
                    labels.push_back(id_to_class[ids[i]]);
                }
            }

            // restricted random frame sampling: one frame per contiguous chunk
            std::vector<std::vector<Tensor>> clips;
            std::vector<std::size_t> picks_flat;
            for (const VideoClip* c : batch) {
                const std::size_t f = c->frames.size();
                std::vector<Tensor> frames;
                for (int s = 0; s < cfg.train_frames; ++s) {
                    const std::size_t lo = s * f / cfg.train_frames;
                    const std::size_t hi =
                        std::max<std::size_t>(lo + 1, (s + 1) * f / cfg.train_frames);
                    const std::size_t pick = std::min(f - 1, lo + erng.below(hi - lo));
                    frames.push_back(c->frames[pick]);
                    picks_flat.push_back(pick);
                }
                clips.push_back(std::move(frames));
            }

            Tape tape;
            double ce_val = 0.0, tri_val = 0.0;
            Tensor total;
            {
                Tape::Scope scope(tape);
                std::vector<VideoDescriptor> descs =
                    model.batch_descriptors(clips, BnMode::train, true);
                Tensor ce = ce_heads_loss(descs, labels, model.heads);
                ce_val = ce.at(0);
                total = ce;
                if (cfg.loss == LossMode::ce_triplet) {
                    std::vector<Tensor> vecs;
                    for (const VideoDescriptor& d : descs) vecs.push_back(d.test_vec);
                    TripletResult tri = batch_hard_triplet_loss(vecs, labels, cfg.margin);
                    tri_val = tri.loss.at(0);
                    total = add(total, tri.loss);
                }
                if (!std::isfinite(total.at(0))) {
                    if (!cfg.out_dir.empty())
                        dump_divergence_diagnostics(cfg.out_dir, model, batch, picks_flat);
                    result.status = TrainStatus::diverged;
                    if (model_out) *model_out = std::move(model);
                    return result;
                }
                tape.backward(total);
            }
            opt.step(params, lr, cfg.weight_decay);
            ce_sum += ce_val;
            tri_sum += tri_val;
            ++batches;
        }

        EpochLog log;
        log.epoch = epoch;
        log.ce = batches ? ce_sum / batches : 0.0;
        log.triplet = batches ? tri_sum / batches : 0.0;
        log.lr = lr;
        if (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            MetricsReport rep = evaluate(model, data);
            log.mean_ap = rep.mean_ap;
            log.top1 = rep.cmc_at(1);
        }
        if (cfg.verbose)
            std::fprintf(stderr, "epoch %3d  ce %.4f  triplet %.4f  lr %g\n", epoch, log.ce,
                         log.triplet, lr);
        result.log.push_back(log);
    }

    result.final_metrics = evaluate(model, data);
    if (!result.log.empty()) {
        result.log.back().mean_ap = result.final_metrics.mean_ap;
        result.log.back().top1 = result.final_metrics.cmc_at(1);
    }

    {
        std::ostringstream blob;
        // in-memory checkpoint digest keeps the determinism contract testable
        // without touching the filesystem
        save_checkpoint_stream(blob, model, static_cast<std::uint32_t>(cfg.epochs), cfg.seed);
        const std::string bytes = blob.str();
        result.checkpoint_digest = fnv1a64(bytes.data(), bytes.size());
        if (!cfg.out_dir.empty()) {
            std::error_code ec;
            fs::create_directories(cfg.out_dir, ec);
            if (ec) throw IoError("train: cannot create " + cfg.out_dir + ": " + ec.message());
            result.checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint.tclc").string();
            std::ofstream os(result.checkpoint_path, std::ios::binary);
            if (!os) throw IoError("train: cannot write " + result.checkpoint_path);
            os << bytes;
            std::ofstream csv(fs::path(cfg.out_dir) / "metrics.csv");
            csv << metrics_log_csv(result.log);
        }
    }
    if (model_out) *model_out = std::move(model);
    return result;
}

MetricsReport evaluate(Model& model, const Dataset& data) {
    std::vector<const VideoClip*> gallery = data.by_role(ClipRole::gallery);
    std::vector<const VideoClip*> queries = data.by_role(ClipRole::query);
    if (gallery.empty() || queries.empty())
        throw PreconditionError("evaluate: corpus needs gallery and query splits");

    std::vector<std::vector<double>> gvecs;
    std::vector<int> glabels;
    for (const VideoClip* c : gallery) {
        gvecs.push_back(model.descriptor(c->frames, BnMode::eval, true, false).test_vec.data());
        glabels.push_back(c->identity);
    }
    std::vector<std::vector<std::size_t>> rankings;
    std::vector<int> qlabels;
    for (const VideoClip* c : queries) {
        VideoDescriptor d = model.descriptor(c->frames, BnMode::eval, true, false);
        rankings.push_back(rank_gallery(d.test_vec.data(), gvecs));
        qlabels.push_back(c->identity);
    }
    return compute_map_cmc(rankings, qlabels, glabels);
}

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

std::string metrics_log_csv(const std::vector<EpochLog>& log) {
    std::ostringstream os;
    os << "epoch,ce_loss,triplet_loss,mAP,top1,lr\n";
    for (const EpochLog& e : log) {
        os << e.epoch << "," << fmt17(e.ce) << "," << fmt17(e.triplet) << ",";
        if (e.mean_ap >= 0.0) os << fmt17(e.mean_ap);
        os << ",";
        if (e.top1 >= 0.0) os << fmt17(e.top1);
        os << "," << fmt17(e.lr) << "\n";
    }
    return os.str();
}

namespace {

constexpr char kCkptMagic[4] = {'T', 'C', 'L', 'C'};

void put_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32s(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64s(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32s(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64s(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

} // namespace

void save_checkpoint_stream(std::ostream& os, Model& model, std::uint32_t epoch,
                            std::uint64_t seed) {
    std::vector<std::pair<std::string, Tensor>> records;
    model.visit_params([&](const std::string& name, Tensor& t) { records.emplace_back(name, t); });
    model.visit_buffers([&](const std::string& name, std::vector<double>& buf) {
        records.emplace_back(name, Tensor::from_data({buf.size()}, buf));
    });

    os.write(kCkptMagic, 4);
    put_u32s(os, 1); // version
    put_u64s(os, model.model_digest());
    put_u32s(os, epoch);
    put_u64s(os, seed);
    put_u32s(os, static_cast<std::uint32_t>(records.size()));
    for (const auto& [name, t] : records) {
        put_u16(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(os, t);
    }
}

void save_checkpoint(const std::string& path, Model& model, std::uint32_t epoch,
                     std::uint64_t seed) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_checkpoint: cannot open " + path);
    save_checkpoint_stream(os, model, epoch, seed);
    if (!os) throw IoError("save_checkpoint: write failed for " + path);
}

namespace {

CheckpointHeader read_header(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCkptMagic, 4) != 0)
        throw IoError("checkpoint: bad magic, not a TCLC file");
    const std::uint32_t version = get_u32s(is);
    if (version != 1) throw IoError("checkpoint: unsupported version");
    CheckpointHeader h;
    h.model_digest = get_u64s(is);
    h.epoch = get_u32s(is);
    h.seed = get_u64s(is);
    return h;
}

} // namespace

CheckpointHeader peek_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("peek_checkpoint: cannot open " + path);
    return read_header(is);
}

CheckpointHeader load_checkpoint(const std::string& path, Model& model) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_checkpoint: cannot open " + path);
    CheckpointHeader h = read_header(is);
    if (h.model_digest != model.model_digest())
        throw PreconditionError("load_checkpoint: checkpoint was written for a different model "
                                "configuration");
    const std::uint32_t n = get_u32s(is);
    std::map<std::string, Tensor> records;
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint16_t len = get_u16(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        records.emplace(std::move(name), read_tensor(is));
    }
    if (!is) throw IoError("load_checkpoint: truncated file " + path);

    model.visit_params([&](const std::string& name, Tensor& t) {
        auto it = records.find(name);
        if (it == records.end()) throw IoError("load_checkpoint: missing record " + name);
        if (it->second.shape() != t.shape())
            throw DimensionError("load_checkpoint: shape mismatch for " + name + ": " +
                                 shape_str(it->second.shape()) + " vs " + shape_str(t.shape()));
        t.data_mut() = it->second.data();
        records.erase(it);
    });
    model.visit_buffers([&](const std::string& name, std::vector<double>& buf) {
        auto it = records.find(name);
        if (it == records.end()) throw IoError("load_checkpoint: missing record " + name);
        if (it->second.size() != buf.size())
            throw DimensionError("load_checkpoint: buffer size mismatch for " + name);
        buf = it->second.data();
        records.erase(it);
    });
    if (!records.empty())
        throw IoError("load_checkpoint: unexpected record " + records.begin()->first);
    return h;
}

} // namespace tcl
