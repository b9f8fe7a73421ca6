#pragma once

#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tcl/backbone.hpp"
#include "tcl/data_eval.hpp"
#include "tcl/layers.hpp"
#include "tcl/tse.hpp"
#include "tcl/tsb.hpp"

namespace tcl {

// Full network assembly: backbone (optionally TSB-enhanced), segment
// division, TSE per segment, temporal average pooling, classifier heads.

struct VideoDescriptor {
    std::vector<Tensor> learner_vecs; // v_1..v_N, pre-normalization
    Tensor test_vec;                  // concat of L2-normalized v_i
};

// T maps -> L = T/N ordered consecutive segments
std::vector<std::vector<Tensor>> segment_divide(const std::vector<Tensor>& maps, std::size_t n);

struct ModelConfig {
    BackboneConfig backbone;
    SeoConfig seo;
    TsbConfig tsb;
    bool use_seo = true;
    bool use_tsb = true;
    std::size_t num_classes = 16;

    std::string signature() const; // model-shape digest input
};

class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed);

    ModelConfig cfg;
    Backbone backbone;
    std::unique_ptr<TsbModule> tsb; // null when disabled
    LearnerStack learners;
    Tensor proj_w; // SEO projection, shared across all (n,k) pairs
    std::vector<Linear> heads;

    // Whole-clip forward to the pooled per-learner vectors and the
    // concatenated test vector. Training requires T divisible by N; with
    // allow_truncate the clip is cut to the largest multiple.
    VideoDescriptor descriptor(const std::vector<Tensor>& frames, BnMode mode,
                               bool allow_truncate = false, bool update_running = true,
                               std::vector<std::vector<SeoArtifacts>>* artifacts = nullptr,
                               std::vector<std::vector<double>>* tsb_attention = nullptr);

    // Joint forward for a training batch: the TSB batch-norm normalizes over
    // the attention descriptors of every clip in the batch, not one clip at a
    // time, mirroring standard batched BN semantics.
    std::vector<VideoDescriptor> batch_descriptors(const std::vector<std::vector<Tensor>>& clips,
                                                   BnMode mode, bool update_running = true);

    VideoDescriptor finalize_descriptor(const std::vector<Tensor>& maps,
                                        std::vector<std::vector<SeoArtifacts>>* artifacts);

    void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
    void visit_buffers(const std::function<void(const std::string&, std::vector<double>&)>& fn);
    std::vector<std::pair<std::string, Tensor>> named_params();
    std::size_t param_count();
    std::uint64_t model_digest() const;
};

VideoDescriptor video_features(Model& model, const VideoClip& clip, BnMode mode,
                               bool allow_truncate = true);

// sum over heads of the batch-mean cross entropy on W_i v_i + b_i
Tensor ce_heads_loss(const std::vector<VideoDescriptor>& batch, const std::vector<int>& labels,
                     const std::vector<Linear>& heads);

struct TripletResult {
    Tensor loss;
    bool no_valid_anchor = false;
};

// batch-hard margin loss over Euclidean distances between re-normalized test
// vectors; anchors need at least one positive and one negative
TripletResult batch_hard_triplet_loss(const std::vector<Tensor>& test_vecs,
                                      const std::vector<int>& labels, double margin);

class Adam {
public:
    explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    // decoupled weight decay
    void step(const std::vector<std::pair<std::string, Tensor>>& params, double lr,
              double weight_decay = 0.0);

private:
    struct Slot {
        std::vector<double> m, v;
    };
    std::unordered_map<std::string, Slot> state_;
    std::size_t t_ = 0;
    double beta1_, beta2_, eps_;
};

enum class LossMode { ce, ce_triplet };

struct TrainConfig {
    ModelConfig model;
    std::uint64_t seed = 12345;
    double lr = 3e-4;
    double lr_decay = 0.1;
    int lr_step = 40;
    double weight_decay = 5e-4;
    int epochs = 150;
    int batch_p = 8;
    int batch_k = 4;
    int train_frames = 4;
    LossMode loss = LossMode::ce;
    double margin = 0.3;
    int eval_every = 0; // 0: evaluate only after the last epoch
    std::string out_dir; // empty: keep everything in memory
    bool verbose = false;
};

double lr_at(const TrainConfig& cfg, int epoch);

struct EpochLog {
    int epoch = 0;
    double ce = 0.0;
    double triplet = 0.0;
    double mean_ap = -1.0; // -1 when not evaluated this epoch
    double top1 = -1.0;
    double lr = 0.0;
};

enum class TrainStatus { ok, diverged };

struct TrainResult {
    TrainStatus status = TrainStatus::ok;
    std::vector<EpochLog> log;
    MetricsReport final_metrics;
    std::string checkpoint_path;
    std::uint64_t checkpoint_digest = 0;
};

// Adam training over the corpus' gallery+spare clips, step-decay schedule,
// deterministic under a fixed seed. Writes checkpoint.tclc and metrics.csv
// under cfg.out_dir when set. model_out receives the trained model.
TrainResult train(const Dataset& data, const TrainConfig& cfg, Model* model_out = nullptr);

// query-vs-gallery retrieval over the corpus splits
MetricsReport evaluate(Model& model, const Dataset& data);

std::string metrics_log_csv(const std::vector<EpochLog>& log);

struct CheckpointHeader {
    std::uint64_t model_digest = 0;
    std::uint32_t epoch = 0;
    std::uint64_t seed = 0;
};

void save_checkpoint_stream(std::ostream& os, Model& model, std::uint32_t epoch,
                            std::uint64_t seed);
void save_checkpoint(const std::string& path, Model& model, std::uint32_t epoch,
                     std::uint64_t seed);
CheckpointHeader load_checkpoint(const std::string& path, Model& model);
CheckpointHeader peek_checkpoint(const std::string& path);

} // namespace tcl
