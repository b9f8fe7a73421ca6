#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tcl/rng.hpp"
#include "tcl/tensor.hpp"

namespace tcl {

// Synthetic video-reID corpus. Frames are stacks of four horizontal body
// bands; the salient band carries a high-amplitude pattern shared between
// identity pairs, while the remaining bands carry low-amplitude patterns
// unique to each identity. A model that only attends to the salient band
// cannot separate the pairs.
//
// The salient band spans 3/16 of the frame height, which is exactly the
// default 3-row erased block once the backbone has reduced the map to 16
// rows; a single erase can remove it completely.
struct SynthSpec {
    int num_identities = 16;
    int clips_per_id = 6; // gallery_per_id + query_per_id + spares
    int frames_per_clip = 8;
    int frame_h = 64;
    int frame_w = 32;
    int channels = 1;
    int bands = 4;
    int salient_band = 2;
    double salient_amp = 1.2;
    double other_amp = 0.25;
    double noise_sigma = 0.06;
    double occlusion_prob = 0.15;
    int gallery_per_id = 3;
    int query_per_id = 2;

    // band row extents; the salient band gets 3/16 of the height, the rest
    // is split across the other bands
    std::vector<int> band_heights() const;
};

enum class ClipRole { gallery, query, spare };

std::string role_name(ClipRole role);
ClipRole role_from_name(const std::string& name);

struct VideoClip {
    int identity = 0;
    int clip_id = 0;
    int camera = 0;
    ClipRole role = ClipRole::gallery;
    std::vector<Tensor> frames; // [C,H,W] each
};

struct Dataset {
    SynthSpec spec;
    std::uint64_t seed = 0;
    std::vector<VideoClip> clips;

    std::vector<const VideoClip*> by_role(ClipRole role) const;
    std::vector<const VideoClip*> training_clips() const; // gallery + spare
};

// Deterministic function of (spec, seed).
Dataset generate(const SynthSpec& spec, std::uint64_t seed);

// the amplitude-scaled band pattern an identity renders at shift 0
std::vector<double> band_pattern(const SynthSpec& spec, std::uint64_t seed, int identity,
                                 int band);

// descending cosine similarity; stable order with index tie-break
std::vector<std::size_t> rank_gallery(const std::vector<double>& query,
                                      const std::vector<std::vector<double>>& gallery);

struct MetricsReport {
    double mean_ap = 0.0;
    std::vector<double> cmc;          // cmc[r-1] = CMC at rank r, full gallery depth
    std::vector<double> per_query_ap; // excluded queries carry -1
    std::size_t queries = 0;
    std::size_t gallery_size = 0;
    std::size_t excluded = 0;

    double cmc_at(std::size_t rank) const; // clamped to gallery depth
};

// AP = mean of the precision at each relevant hit; CMC(r) = fraction of
// queries with a correct match in the top r. Queries without any relevant
// gallery item are excluded and counted.
MetricsReport compute_map_cmc(const std::vector<std::vector<std::size_t>>& rankings,
                              const std::vector<int>& query_labels,
                              const std::vector<int>& gallery_labels);

// corpus on disk: one directory per identity, clips as sequences of binary
// tensor frames, plus a manifest
void save_dataset(const Dataset& data, const std::string& dir);
Dataset load_dataset(const std::string& dir);

std::string metrics_csv(const MetricsReport& report);
std::string metrics_summary(const MetricsReport& report);

} // namespace tcl
