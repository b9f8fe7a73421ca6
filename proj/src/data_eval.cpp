#include "tcl/data_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tcl/tensor_io.hpp"

namespace fs = std::filesystem;

namespace tcl {

std::string role_name(ClipRole role) {
    switch (role) {
        case ClipRole::gallery: return "gallery";
        case ClipRole::query: return "query";
        default: return "spare";
    }
}

ClipRole role_from_name(const std::string& name) {
    if (name == "gallery") return ClipRole::gallery;
    if (name == "query") return ClipRole::query;
    if (name == "spare") return ClipRole::spare;
    throw IoError("unknown clip role '" + name + "'");
}

std::vector<const VideoClip*> Dataset::by_role(ClipRole role) const {
    std::vector<const VideoClip*> out;
    for (const VideoClip& c : clips)
        if (c.role == role) out.push_back(&c);
    return out;
}

std::vector<const VideoClip*> Dataset::training_clips() const {
    std::vector<const VideoClip*> out;
    for (const VideoClip& c : clips)
        if (c.role != ClipRole::query) out.push_back(&c);
    return out;
}

namespace {

// smooth random texture in [0,1]: uniform noise put through two box blurs
std::vector<double> smooth_pattern(Rng rng, std::size_t h, std::size_t w) {
    std::vector<double> p(h * w);
    for (double& v : p) v = rng.uniform();
    for (int pass = 0; pass < 2; ++pass) {
        std::vector<double> q(h * w, 0.0);
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                double acc = 0.0;
                int cnt = 0;
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        const long ii = static_cast<long>(i) + di;
                        const long jj = static_cast<long>(j) + dj;
                        if (ii < 0 || jj < 0 || ii >= static_cast<long>(h) ||
                            jj >= static_cast<long>(w))
                            continue;
                        acc += p[ii * w + jj];
                        ++cnt;
                    }
                q[i * w + j] = acc / cnt;
            }
        p = std::move(q);
    }
    double lo = p[0], hi = p[0];
    for (double v : p) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi - lo;
    for (double& v : p) v = span > 0.0 ? (v - lo) / span : 0.5;
    return p;
}

Rng pattern_stream(const SynthSpec& spec, std::uint64_t seed, int identity, int band) {
    Rng master(seed);
    if (band == spec.salient_band) {
        // the salient appearance is shared within an identity pair
        return master.fork(50000 + static_cast<std::uint64_t>(identity / 2));
    }
    return master.fork(10000 + static_cast<std::uint64_t>(identity) * 17 +
                       static_cast<std::uint64_t>(band));
}

} // namespace

std::vector<int> SynthSpec::band_heights() const {
    std::vector<int> heights(bands, 0);
    const int salient_rows = std::max(1, 3 * frame_h / 16);
    heights[salient_band] = salient_rows;
    int rest = frame_h - salient_rows;
    int others = bands - 1;
    for (int b = 0; b < bands; ++b) {
        if (b == salient_band) continue;
        const int take = (rest + others - 1) / others;
        heights[b] = take;
        rest -= take;
        --others;
    }
    return heights;
}

std::vector<double> band_pattern(const SynthSpec& spec, std::uint64_t seed, int identity,
                                 int band) {
    const std::size_t band_h = static_cast<std::size_t>(spec.band_heights()[band]);
    const double amp = band == spec.salient_band ? spec.salient_amp : spec.other_amp;
    std::vector<double> p = smooth_pattern(pattern_stream(spec, seed, identity, band), band_h,
                                           static_cast<std::size_t>(spec.frame_w));
    for (double& v : p) v *= amp;
    return p;
}

Dataset generate(const SynthSpec& spec, std::uint64_t seed) {
    if (spec.num_identities < 2)
        throw PreconditionError("generate: need at least 2 identities, got " +
                                std::to_string(spec.num_identities));
    if (spec.bands < 2 || spec.salient_band < 0 || spec.salient_band >= spec.bands)
        throw PreconditionError("generate: salient band outside the layout");
    if (spec.gallery_per_id + spec.query_per_id > spec.clips_per_id)
        throw PreconditionError("generate: clip roles exceed clips_per_id");
    const std::vector<int> heights = spec.band_heights();
    for (int bh : heights)
        if (bh < 1) throw PreconditionError("generate: frame height too small for the band layout");

    const std::size_t h = spec.frame_h, w = spec.frame_w;
    std::vector<std::size_t> band_of(h);
    {
        std::size_t row = 0;
        for (int b = 0; b < spec.bands; ++b)
            for (int i = 0; i < heights[b]; ++i) band_of[row++] = b;
    }
    std::vector<std::size_t> band_start(spec.bands, 0);
    for (int b = 1; b < spec.bands; ++b)
        band_start[b] = band_start[b - 1] + static_cast<std::size_t>(heights[b - 1]);

    Dataset data;
    data.spec = spec;
    data.seed = seed;
    Rng master(seed);

    for (int id = 0; id < spec.num_identities; ++id) {
        std::vector<std::vector<double>> bands;
        for (int b = 0; b < spec.bands; ++b) bands.push_back(band_pattern(spec, seed, id, b));

        for (int clip = 0; clip < spec.clips_per_id; ++clip) {
            VideoClip vc;
            vc.identity = id;
            vc.clip_id = clip;
            vc.camera = 0;
            vc.role = clip < spec.gallery_per_id                      ? ClipRole::gallery
                      : clip < spec.gallery_per_id + spec.query_per_id ? ClipRole::query
                                                                       : ClipRole::spare;
            Rng crng = master.fork(100000 + static_cast<std::uint64_t>(id) * 1009 +
                                   static_cast<std::uint64_t>(clip));
            const std::size_t phase = crng.below(spec.frames_per_clip);
            for (int f = 0; f < spec.frames_per_clip; ++f) {
                const double angle =
                    2.0 * 3.14159265358979323846 * (f + phase) / spec.frames_per_clip;
                const long shift = std::lround(2.0 * std::sin(angle));
                Tensor frame = Tensor::zeros(
                    {static_cast<std::size_t>(spec.channels), h, w});
                auto& fv = frame.data_mut();
                for (std::size_t i = 0; i < h; ++i) {
                    const std::size_t b = band_of[i];
                    const std::size_t br = i - band_start[b];
                    for (std::size_t j = 0; j < w; ++j) {
                        const std::size_t src =
                            static_cast<std::size_t>((static_cast<long>(j) - shift +
                                                      2 * static_cast<long>(w)) %
                                                     static_cast<long>(w));
                        const double v = bands[b][br * w + src];
                        for (int c = 0; c < spec.channels; ++c)
                            fv[(c * h + i) * w + j] = v;
                    }
                }
                if (spec.noise_sigma > 0.0)
                    for (double& v : fv) v += crng.normal(0.0, spec.noise_sigma);
                if (crng.uniform() < spec.occlusion_prob) {
                    const std::size_t oh = 8 + crng.below(17);
                    const std::size_t ow = 8 + crng.below(9);
                    const std::size_t r0 = crng.below(h - std::min(oh, h - 1));
                    const std::size_t c0 = crng.below(w - std::min(ow, w - 1));
                    for (std::size_t i = r0; i < std::min(h, r0 + oh); ++i)
                        for (std::size_t j = c0; j < std::min(w, c0 + ow); ++j)
                            for (int c = 0; c < spec.channels; ++c)
                                fv[(c * h + i) * w + j] = 0.5;
                }
                vc.frames.push_back(std::move(frame));
            }
            data.clips.push_back(std::move(vc));
        }
    }
    return data;
}

std::vector<std::size_t> rank_gallery(const std::vector<double>& query,
                                      const std::vector<std::vector<double>>& gallery) {
    if (gallery.empty()) throw PreconditionError("rank_gallery: empty gallery");
    for (const auto& g : gallery)
        if (g.size() != query.size())
            throw DimensionError("rank_gallery: descriptor length " + std::to_string(g.size()) +
                                 " does not match query length " + std::to_string(query.size()));
    double qn = 0.0;
    for (double v : query) qn += v * v;
    qn = std::max(std::sqrt(qn), 1e-12);

    std::vector<double> sim(gallery.size());
    for (std::size_t i = 0; i < gallery.size(); ++i) {
        double dot = 0.0, gn = 0.0;
        for (std::size_t j = 0; j < query.size(); ++j) {
            dot += query[j] * gallery[i][j];
            gn += gallery[i][j] * gallery[i][j];
        }
        sim[i] = dot / (qn * std::max(std::sqrt(gn), 1e-12));
    }
    std::vector<std::size_t> order(gallery.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (sim[a] != sim[b]) return sim[a] > sim[b];
        return a < b;
    });
    return order;
}

double MetricsReport::cmc_at(std::size_t rank) const {
    if (cmc.empty() || rank == 0) return 0.0;
    return cmc[std::min(rank, cmc.size()) - 1];
}

MetricsReport compute_map_cmc(const std::vector<std::vector<std::size_t>>& rankings,
                              const std::vector<int>& query_labels,
                              const std::vector<int>& gallery_labels) {
    if (rankings.size() != query_labels.size())
        throw PreconditionError("compute_map_cmc: one ranking per query required");
    MetricsReport rep;
    rep.gallery_size = gallery_labels.size();
    rep.queries = rankings.size();
    rep.cmc.assign(gallery_labels.size(), 0.0);
    rep.per_query_ap.assign(rankings.size(), -1.0);

    double ap_total = 0.0;
    std::size_t valid = 0;
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        const auto& order = rankings[q];
        if (order.size() != gallery_labels.size())
            throw DimensionError("compute_map_cmc: ranking length mismatch");
        std::size_t total_rel = 0;
        for (int gl : gallery_labels) total_rel += (gl == query_labels[q]);
        if (total_rel == 0) {
            ++rep.excluded;
            continue;
        }
        double ap = 0.0;
        std::size_t hits = 0;
        std::size_t first_hit = order.size();
        for (std::size_t pos = 0; pos < order.size(); ++pos) {
            if (gallery_labels[order[pos]] != query_labels[q]) continue;
            ++hits;
            ap += static_cast<double>(hits) / static_cast<double>(pos + 1);
            if (first_hit == order.size()) first_hit = pos;
        }
        ap /= static_cast<double>(total_rel);
        rep.per_query_ap[q] = ap;
        ap_total += ap;
        ++valid;
        for (std::size_t r = first_hit; r < rep.cmc.size(); ++r) rep.cmc[r] += 1.0;
    }
    if (valid > 0) {
        rep.mean_ap = ap_total / static_cast<double>(valid);
        for (double& c : rep.cmc) c /= static_cast<double>(valid);
    }
    return rep;
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

std::string metrics_csv(const MetricsReport& rep) {
    std::ostringstream os;
    os << "metric,value\n";
    os << "mAP," << fmt_double(rep.mean_ap) << "\n";
    os << "cmc1," << fmt_double(rep.cmc_at(1)) << "\n";
    os << "cmc5," << fmt_double(rep.cmc_at(5)) << "\n";
    os << "cmc10," << fmt_double(rep.cmc_at(10)) << "\n";
    os << "queries," << rep.queries << "\n";
    os << "gallery," << rep.gallery_size << "\n";
    os << "excluded," << rep.excluded << "\n";
    for (std::size_t q = 0; q < rep.per_query_ap.size(); ++q)
        os << "query_ap_" << q << "," << fmt_double(rep.per_query_ap[q]) << "\n";
    return os.str();
}

std::string metrics_summary(const MetricsReport& rep) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "mAP %.4f | top-1 %.4f | top-5 %.4f | top-10 %.4f | %zu queries vs %zu gallery "
                  "(%zu excluded)",
                  rep.mean_ap, rep.cmc_at(1), rep.cmc_at(5), rep.cmc_at(10), rep.queries,
                  rep.gallery_size, rep.excluded);
    return buf;
}

void save_dataset(const Dataset& data, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("save_dataset: cannot create " + dir + ": " + ec.message());

    std::ostringstream manifest;
    manifest << "# tcl synthetic corpus\n";
    manifest << "seed=" << data.seed << "\n";
    const SynthSpec& s = data.spec;
    manifest << "num_identities=" << s.num_identities << "\n";
    manifest << "clips_per_id=" << s.clips_per_id << "\n";
    manifest << "frames_per_clip=" << s.frames_per_clip << "\n";
    manifest << "frame_h=" << s.frame_h << "\n";
    manifest << "frame_w=" << s.frame_w << "\n";
    manifest << "channels=" << s.channels << "\n";
    manifest << "bands=" << s.bands << "\n";
    manifest << "salient_band=" << s.salient_band << "\n";
    manifest << "salient_amp=" << fmt_double(s.salient_amp) << "\n";
    manifest << "other_amp=" << fmt_double(s.other_amp) << "\n";
    manifest << "noise_sigma=" << fmt_double(s.noise_sigma) << "\n";
    manifest << "occlusion_prob=" << fmt_double(s.occlusion_prob) << "\n";
    manifest << "gallery_per_id=" << s.gallery_per_id << "\n";
    manifest << "query_per_id=" << s.query_per_id << "\n";

    for (const VideoClip& clip : data.clips) {
        char sub[64];
        std::snprintf(sub, sizeof(sub), "id%03d/clip%02d", clip.identity, clip.clip_id);
        const fs::path clip_dir = fs::path(dir) / sub;
        fs::create_directories(clip_dir, ec);
        if (ec) throw IoError("save_dataset: cannot create " + clip_dir.string());
        for (std::size_t f = 0; f < clip.frames.size(); ++f) {
            char name[32];
            std::snprintf(name, sizeof(name), "frame%03zu.t64", f);
            save_tensor((clip_dir / name).string(), clip.frames[f]);
        }
        manifest << "clip id=" << clip.identity << " clip=" << clip.clip_id
                 << " role=" << role_name(clip.role) << " camera=" << clip.camera
                 << " frames=" << clip.frames.size() << " dir=" << sub << "\n";
    }
    std::ofstream mf(fs::path(dir) / "manifest.txt");
    if (!mf) throw IoError("save_dataset: cannot write manifest in " + dir);
    mf << manifest.str();
}

namespace {

std::uint64_t parse_header_u64(const std::string& line) {
    return std::stoull(line.substr(line.find('=') + 1));
}

double parse_header_double(const std::string& line) {
    return std::stod(line.substr(line.find('=') + 1));
}

} // namespace

Dataset load_dataset(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.txt");
    if (!mf) throw IoError("load_dataset: no manifest in " + dir);
    Dataset data;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (line.rfind("clip ", 0) == 0) {
            VideoClip clip;
            std::size_t frames = 0;
            std::string sub;
            std::istringstream is(line.substr(5));
            std::string tok;
            while (is >> tok) {
                const auto eq = tok.find('=');
                const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
                if (key == "id") clip.identity = std::stoi(val);
                else if (key == "clip") clip.clip_id = std::stoi(val);
                else if (key == "role") clip.role = role_from_name(val);
                else if (key == "camera") clip.camera = std::stoi(val);
                else if (key == "frames") frames = std::stoul(val);
                else if (key == "dir") sub = val;
            }
            for (std::size_t f = 0; f < frames; ++f) {
                char name[32];
                std::snprintf(name, sizeof(name), "frame%03zu.t64", f);
                clip.frames.push_back(load_tensor((fs::path(dir) / sub / name).string()));
            }
            data.clips.push_back(std::move(clip));
        } else if (line.rfind("seed=", 0) == 0) data.seed = parse_header_u64(line);
        else if (line.rfind("num_identities=", 0) == 0)
            data.spec.num_identities = static_cast<int>(parse_header_u64(line));
        else if (line.rfind("clips_per_id=", 0) == 0)
            data.spec.clips_per_id = static_cast<int>(parse_header_u64(line));
        else if (line.rfind("frames_per_clip=", 0) == 0)
            data.spec.frames_per_clip = static_cast<int>(parse_header_u64(line));
        else if (line.rfind("frame_h=", 0) == 0)
            data.spec.frame_h = static_cast<int>(parse_header_u64(line));
        else if (line.rfind("frame_w=", 0) == 0)
            data.spec.frame_w = static_cast<int>(parse_header_u64(line));
        else if (line.rfind("channels=", 0) == 0)
            data.spec.channels = static_cast<int>(parse_header_u64(line));
        else if (line.rfind("bands=", 0) == 0)
            data.spec.bands = static_cast<int>(parse_header_u64(line));
        else if (line.rfind("salient_band=", 0) == 0)
            data.spec.salient_band = static_cast<int>(parse_header_u64(line));
        else if (line.rfind("salient_amp=", 0) == 0)
            data.spec.salient_amp = parse_header_double(line);
        else if (line.rfind("other_amp=", 0) == 0)
            data.spec.other_amp = parse_header_double(line);
        else if (line.rfind("noise_sigma=", 0) == 0)
            data.spec.noise_sigma = parse_header_double(line);
        else if (line.rfind("occlusion_prob=", 0) == 0)
            data.spec.occlusion_prob = parse_header_double(line);
        else if (line.rfind("gallery_per_id=", 0) == 0)
            data.spec.gallery_per_id = static_cast<int>(parse_header_u64(line));
        else if (line.rfind("query_per_id=", 0) == 0)
            data.spec.query_per_id = static_cast<int>(parse_header_u64(line));
    }
    if (data.clips.empty()) throw IoError("load_dataset: manifest lists no clips");
    return data;
}

} // namespace tcl
