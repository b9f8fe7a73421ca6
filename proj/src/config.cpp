#include "tcl/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "tcl/tensor_io.hpp"

namespace tcl {

SynthSpec RunConfig::synth_spec() const {
    SynthSpec s;
    s.num_identities = ids;
    s.clips_per_id = clips_per_id;
    s.frames_per_clip = frames_per_clip;
    s.frame_h = frame_h;
    s.frame_w = frame_w;
    s.channels = channels;
    s.salient_band = salient_band;
    s.salient_amp = salient_amp;
    s.other_amp = other_amp;
    s.noise_sigma = noise_sigma;
    s.occlusion_prob = occlusion_prob;
    s.gallery_per_id = gallery_per_id;
    s.query_per_id = query_per_id;
    return s;
}

ModelConfig RunConfig::model_config() const {
    ModelConfig mc;
    mc.backbone.stage_channels = stage_channels;
    mc.backbone.blocks_per_stage = blocks_per_stage;
    mc.backbone.in_channels = static_cast<std::size_t>(channels);
    mc.backbone.in_h = static_cast<std::size_t>(frame_h);
    mc.backbone.in_w = static_cast<std::size_t>(frame_w);
    mc.backbone.head_channels = static_cast<std::size_t>(head_channels);
    mc.backbone.tsb_stage = tsb_stage;
    mc.seo.n_learners = n_learners;
    mc.seo.block_h = block_h;
    mc.seo.block_w = block_w;
    mc.seo.stride_h = stride_h;
    mc.seo.stride_w = stride_w;
    mc.tsb.temperature = tau;
    mc.tsb.stage = tsb_stage;
    mc.use_seo = seo;
    mc.use_tsb = tsb;
    mc.num_classes = static_cast<std::size_t>(ids);
    return mc;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig tc;
    tc.model = model_config();
    tc.seed = seed;
    tc.lr = lr;
    tc.lr_decay = lr_decay;
    tc.lr_step = lr_step;
    tc.weight_decay = weight_decay;
    tc.epochs = epochs;
    tc.batch_p = batch_p;
    tc.batch_k = batch_k;
    tc.train_frames = train_frames;
    tc.loss = loss == "ce+triplet" ? LossMode::ce_triplet : LossMode::ce;
    tc.margin = margin;
    tc.eval_every = eval_every;
    tc.out_dir = out_dir;
    return tc;
}

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string channels_str(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

std::vector<std::size_t> parse_channels(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        out.push_back(std::stoul(tok));
    }
    if (out.empty()) throw PreconditionError("config: stage_channels must not be empty");
    return out;
}

} // namespace

std::string RunConfig::serialize() const {
    std::ostringstream os;
    os << "# tcl run configuration\n";
    os << "seed = " << seed << "\n";
    os << "out_dir = " << out_dir << "\n";
    os << "corpus_dir = " << corpus_dir << "\n";
    os << "threads = " << threads << "\n";
    os << "ids = " << ids << "\n";
    os << "clips_per_id = " << clips_per_id << "\n";
    os << "frames_per_clip = " << frames_per_clip << "\n";
    os << "frame_h = " << frame_h << "\n";
    os << "frame_w = " << frame_w << "\n";
    os << "channels = " << channels << "\n";
    os << "salient_band = " << salient_band << "\n";
    os << "salient_amp = " << fmt17(salient_amp) << "\n";
    os << "other_amp = " << fmt17(other_amp) << "\n";
    os << "noise_sigma = " << fmt17(noise_sigma) << "\n";
    os << "occlusion_prob = " << fmt17(occlusion_prob) << "\n";
    os << "gallery_per_id = " << gallery_per_id << "\n";
    os << "query_per_id = " << query_per_id << "\n";
    os << "stage_channels = " << channels_str(stage_channels) << "\n";
    os << "blocks_per_stage = " << blocks_per_stage << "\n";
    os << "head_channels = " << head_channels << "\n";
    os << "n_learners = " << n_learners << "\n";
    os << "seo = " << (seo ? "true" : "false") << "\n";
    os << "block_h = " << block_h << "\n";
    os << "block_w = " << block_w << "\n";
    os << "stride_h = " << stride_h << "\n";
    os << "stride_w = " << stride_w << "\n";
    os << "tsb = " << (tsb ? "true" : "false") << "\n";
    os << "tsb_stage = " << tsb_stage << "\n";
    os << "tau = " << fmt17(tau) << "\n";
    os << "loss = " << loss << "\n";
    os << "margin = " << fmt17(margin) << "\n";
    os << "lr = " << fmt17(lr) << "\n";
    os << "lr_decay = " << fmt17(lr_decay) << "\n";
    os << "lr_step = " << lr_step << "\n";
    os << "weight_decay = " << fmt17(weight_decay) << "\n";
    os << "epochs = " << epochs << "\n";
    os << "batch_p = " << batch_p << "\n";
    os << "batch_k = " << batch_k << "\n";
    os << "train_frames = " << train_frames << "\n";
    os << "eval_every = " << eval_every << "\n";
    return os.str();
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig cfg;
    std::map<std::string, std::function<void(const std::string&)>> setters;
    auto set_u64 = [](std::uint64_t& f) {
        return [&f](const std::string& v) { f = std::stoull(v); };
    };
    auto set_int = [](int& f) {
        return [&f](const std::string& v) { f = std::stoi(v); };
    };
    auto set_double = [](double& f) {
        return [&f](const std::string& v) { f = std::stod(v); };
    };
    auto set_string = [](std::string& f) {
        return [&f](const std::string& v) { f = v; };
    };
    auto set_bool = [](bool& f) {
        return [&f](const std::string& v) {
            if (v == "true" || v == "1") f = true;
            else if (v == "false" || v == "0") f = false;
            else throw PreconditionError("config: boolean must be true/false, got '" + v + "'");
        };
    };
    setters["seed"] = set_u64(cfg.seed);
    setters["out_dir"] = set_string(cfg.out_dir);
    setters["corpus_dir"] = set_string(cfg.corpus_dir);
    setters["threads"] = set_int(cfg.threads);
    setters["ids"] = set_int(cfg.ids);
    setters["clips_per_id"] = set_int(cfg.clips_per_id);
    setters["frames_per_clip"] = set_int(cfg.frames_per_clip);
    setters["frame_h"] = set_int(cfg.frame_h);
    setters["frame_w"] = set_int(cfg.frame_w);
    setters["channels"] = set_int(cfg.channels);
    setters["salient_band"] = set_int(cfg.salient_band);
    setters["salient_amp"] = set_double(cfg.salient_amp);
    setters["other_amp"] = set_double(cfg.other_amp);
    setters["noise_sigma"] = set_double(cfg.noise_sigma);
    setters["occlusion_prob"] = set_double(cfg.occlusion_prob);
    setters["gallery_per_id"] = set_int(cfg.gallery_per_id);
    setters["query_per_id"] = set_int(cfg.query_per_id);
    setters["stage_channels"] = [&cfg](const std::string& v) {
        cfg.stage_channels = parse_channels(v);
    };
    setters["blocks_per_stage"] = set_int(cfg.blocks_per_stage);
    setters["head_channels"] = set_int(cfg.head_channels);
    setters["n_learners"] = set_int(cfg.n_learners);
    setters["seo"] = set_bool(cfg.seo);
    setters["block_h"] = set_int(cfg.block_h);
    setters["block_w"] = set_int(cfg.block_w);
    setters["stride_h"] = set_int(cfg.stride_h);
    setters["stride_w"] = set_int(cfg.stride_w);
    setters["tsb"] = set_bool(cfg.tsb);
    setters["tsb_stage"] = set_int(cfg.tsb_stage);
    setters["tau"] = set_double(cfg.tau);
    setters["loss"] = [&cfg](const std::string& v) {
        if (v != "ce" && v != "ce+triplet")
            throw PreconditionError("config: loss must be 'ce' or 'ce+triplet', got '" + v + "'");
        cfg.loss = v;
    };
    setters["margin"] = set_double(cfg.margin);
    setters["lr"] = set_double(cfg.lr);
    setters["lr_decay"] = set_double(cfg.lr_decay);
    setters["lr_step"] = set_int(cfg.lr_step);
    setters["weight_decay"] = set_double(cfg.weight_decay);
    setters["epochs"] = set_int(cfg.epochs);
    setters["batch_p"] = set_int(cfg.batch_p);
    setters["batch_k"] = set_int(cfg.batch_k);
    setters["train_frames"] = set_int(cfg.train_frames);
    setters["eval_every"] = set_int(cfg.eval_every);

    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) continue;
        auto it = setters.find(key);
        if (it == setters.end())
            throw PreconditionError("config: unknown key '" + key + "'");
        it->second(value);
    }
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
}

void RunConfig::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("config: cannot write " + path);
    os << serialize();
}

std::uint64_t RunConfig::digest() const { return fnv1a64(serialize()); }

} // namespace tcl
