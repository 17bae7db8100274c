#include "galbnn/protocol.hpp"

#include "galbnn/errors.hpp"
#include "galbnn/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace galbnn {

namespace {

constexpr std::uint64_t kScheduleStream = 0x7a3bULL;
constexpr std::uint64_t kEpochStream = 0xe90cULL;
constexpr std::uint64_t kStepStream = 0x57e9ULL;
constexpr std::uint64_t kSplitStream = 0x5a11dULL;
constexpr std::uint64_t kProbeStream = 0x9b0eULL;
constexpr std::size_t kEvalChunk = 256;

struct BatchLoss {
    double total = 0.0;
    nn::Tensor<float> grad;
};

BatchLoss batch_loss(const nn::Tensor<float>& y, const std::vector<const DatasetRecord*>& recs, HeadKind head,
                     double sigma_floor) {
    const std::size_t b = recs.size();
    BatchLoss out{0.0, nn::Tensor<float>(y.shape())};
    const double inv_b = 1.0 / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
        const Ellipticity& t = recs[i]->label;
        if (head == HeadKind::PlainL2) {
            const Vec2 mu{y[i * 2], y[i * 2 + 1]};
            out.total += l2_loss(mu, t);
            out.grad[i * 2] = static_cast<float>(2.0 * (mu.x - t.e1) * inv_b);
            out.grad[i * 2 + 1] = static_cast<float>(2.0 * (mu.y - t.e2) * inv_b);
        } else {
            std::array<double, 5> raw;
            for (int r = 0; r < 5; ++r) raw[r] = y[i * 5 + r];
            const MvnPrediction p = head_to_mvn(raw, sigma_floor);
            out.total += nll_loss(p, t);
            const auto g = nll_gradient(p, t);
            for (int r = 0; r < 5; ++r) out.grad[i * 5 + r] = static_cast<float>(g[r] * inv_b);
        }
    }
    return out;
}

struct ValStats {
    double loss = 0.0;
    double mean_det = 0.0;
    double rms_z1 = 0.0;
    double rms_z2 = 0.0;
};

ValStats validate(Network<float>& model, const Dataset& data, const std::vector<std::size_t>& idx, Variant v) {
    ValStats s;
    if (idx.empty()) return s;
    const nn::Tensor<float> y = predict_deterministic(model, data, idx, v);
    const double floor = model.arch().sigma_floor;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const Ellipticity& t = data.records[idx[i]].label;
        if (model.head_kind() == HeadKind::PlainL2) {
            s.loss += l2_loss({y[i * 2], y[i * 2 + 1]}, t);
        } else {
            std::array<double, 5> raw;
            for (int r = 0; r < 5; ++r) raw[r] = y[i * 5 + r];
            const MvnPrediction p = head_to_mvn(raw, floor);
            s.loss += nll_loss(p, t);
            s.mean_det += p.cov.det();
            const double z1 = (t.e1 - p.mu.x) / p.l11;
            const double z2 = (t.e2 - p.mu.y - p.l21 * z1) / p.l22;
            s.rms_z1 += z1 * z1;
            s.rms_z2 += z2 * z2;
        }
    }
    const double n = static_cast<double>(idx.size());
    s.loss /= n;
    s.mean_det /= n;
    s.rms_z1 = std::sqrt(s.rms_z1 / n);
    s.rms_z2 = std::sqrt(s.rms_z2 / n);
    return s;
}

std::vector<std::pair<std::string, nn::Param<float>*>> named_params(Network<float>& net) {
    std::vector<std::pair<std::string, nn::Param<float>*>> out;
    for (auto& np : net.trunk().named_params()) out.emplace_back(np.name, np.param);
    for (auto& np : net.head().named_params()) out.emplace_back(np.name, np.param);
    return out;
}

std::vector<std::size_t> intersect(const std::vector<std::size_t>& sorted_a, std::vector<std::size_t> b) {
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> out;
    std::set_intersection(sorted_a.begin(), sorted_a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

}  // namespace

double noisy_fraction(int epoch, const NoiseRamp& ramp) {
    if (!ramp.enabled || epoch < 0) return 0.0;
    const double f = ramp.step_fraction * static_cast<double>(epoch / ramp.step_epochs);
    return std::clamp(f, 0.0, 1.0);
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
    std::vector<std::pair<std::uint64_t, std::size_t>> keyed(n);
    for (std::size_t i = 0; i < n; ++i) keyed[i] = {derive_seed(seed, i), i};
    std::sort(keyed.begin(), keyed.end());
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = keyed[i].second;
    return out;
}

NoiseSchedule::NoiseSchedule(NoiseRamp ramp, std::size_t n, std::uint64_t seed)
    : ramp_(ramp), order_(seeded_permutation(n, seed)), rank_(n) {
    for (std::size_t r = 0; r < n; ++r) rank_[order_[r]] = r;
}

std::size_t NoiseSchedule::noisy_count(int epoch) const {
    return static_cast<std::size_t>(std::llround(fraction(epoch) * static_cast<double>(order_.size())));
}

Split split_by_scene(const Dataset& ds, double validation_fraction) {
    Split s;
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        const double u = to_unit(derive_seed(ds.records[i].scene.seed, kSplitStream));
        (u < validation_fraction ? s.validation : s.train).push_back(i);
    }
    return s;
}

std::span<const float> pixels(const DatasetRecord& r, Variant v) {
    if (v == Variant::Noisy) {
        if (r.noisy.empty()) throw ContractError("dataset has no noisy variant");
        return r.noisy;
    }
    return r.clean;
}

nlohmann::json to_json(const EpochMetrics& m) {
    return {{"epoch", m.epoch},
            {"noisy_fraction", m.noisy_fraction},
            {"train_loss", m.train_loss},
            {"val_loss", m.val_loss},
            {"val_mean_det", m.val_mean_det},
            {"val_rms_z1", m.val_rms_z1},
            {"val_rms_z2", m.val_rms_z2}};
}

EpochMetrics epoch_metrics_from_json(const nlohmann::json& j) {
    EpochMetrics m;
    m.epoch = j.at("epoch").get<int>();
    m.noisy_fraction = j.at("noisy_fraction").get<double>();
    m.train_loss = j.at("train_loss").get<double>();
    m.val_loss = j.at("val_loss").get<double>();
    m.val_mean_det = j.at("val_mean_det").get<double>();
    m.val_rms_z1 = j.at("val_rms_z1").get<double>();
    m.val_rms_z2 = j.at("val_rms_z2").get<double>();
    return m;
}

nn::Tensor<float> predict_deterministic(Network<float>& model, const Dataset& data,
                                        const std::vector<std::size_t>& indices, Variant variant) {
    const auto outs = static_cast<std::size_t>(model.outputs());
    nn::Tensor<float> y({indices.size(), outs});
    for (std::size_t lo = 0; lo < indices.size(); lo += kEvalChunk) {
        const std::size_t hi = std::min(indices.size(), lo + kEvalChunk);
        std::vector<std::span<const float>> stamps;
        for (std::size_t i = lo; i < hi; ++i) stamps.push_back(pixels(data.records[indices[i]], variant));
        const nn::Tensor<float> out =
            model.forward(make_input_batch<float>(stamps, model.arch()), {nn::Mode::EvalDeterministic, 0, {}});
        std::copy(out.data(), out.data() + out.size(), y.data() + lo * outs);
    }
    return y;
}

ModelFile make_model_file(TrainResult& r, const nlohmann::json& extra) {
    ModelFile f;
    f.architecture = architecture_json(r.model.arch(), r.model.head_kind());
    f.tensors = r.model.export_tensors();
    auto params = named_params(r.model);
    auto& m = r.optimizer.first_moments();
    auto& v = r.optimizer.second_moments();
    if (!m.empty()) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            f.optimizer.push_back({"adam.m." + params[i].first, m[i].shape(), m[i].storage()});
            f.optimizer.push_back({"adam.v." + params[i].first, v[i].shape(), v[i].storage()});
        }
    }
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& h : r.history) hist.push_back(to_json(h));
    f.training = extra;
    f.training["epochs_completed"] = r.history.size();
    f.training["steps"] = r.steps;
    f.training["adam_steps"] = r.optimizer.steps();
    f.training["lr"] = r.optimizer.hyper().lr;
    f.training["initial_mean_det"] = r.initial_mean_det;
    f.training["history"] = hist;
    f.manifest_hash = extra.contains("config_hash") ? extra["config_hash"].get<std::string>()
                                                    : content_hash(f.training.dump());
    return f;
}

void save_checkpoint(TrainResult& r, const nlohmann::json& extra, const std::filesystem::path& path) {
    write_model(make_model_file(r, extra), path);
}

Network<float> load_network(const ModelFile& f) {
    Network<float> net(arch_config_from_json(f.architecture.at("config")), head_from_json(f.architecture));
    net.import_tensors(f.tensors);
    return net;
}

namespace {

void restore_optimizer(TrainResult& r, const ModelFile& f) {
    auto params = named_params(r.model);
    if (f.optimizer.empty()) return;
    if (f.optimizer.size() != 2 * params.size()) throw MismatchError("checkpoint optimizer state does not match the model");
    std::vector<nn::Tensor<float>> m, v;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const NamedTensor& tm = f.optimizer[2 * i];
        const NamedTensor& tv = f.optimizer[2 * i + 1];
        if (tm.name != "adam.m." + params[i].first || tv.name != "adam.v." + params[i].first)
            throw MismatchError("checkpoint optimizer tensor order does not match the model");
        m.emplace_back(tm.shape, tm.data);
        v.emplace_back(tv.shape, tv.data);
    }
    r.optimizer.restore(f.training.at("adam_steps").get<std::uint64_t>(), std::move(m), std::move(v));
}

}  // namespace

TrainResult run_training(Network<float> model, const Dataset& data, const TrainConfig& cfg, const TrainJob& job) {
    if (job.head != model.head_kind()) throw ContractError("training job head does not match the model head");
    Split split = split_by_scene(data, cfg.validation_fraction);
    if (!job.subset.empty()) {
        split.train = intersect(split.train, job.subset);
        split.validation = intersect(split.validation, job.subset);
    }
    if (split.train.size() < 2) throw ContractError("training split has fewer than 2 records");
    if ((job.ramp || job.variant == Variant::Noisy) && !data.header.has_noisy)
        throw ContractError("noisy training needs a dataset with noisy variants");

    TrainResult r(std::move(model));
    r.optimizer = nn::Adam<float>({job.lr, cfg.beta1, cfg.beta2, cfg.eps});
    const double floor = r.model.arch().sigma_floor;
    NoiseRamp ramp = cfg.noise;
    ramp.enabled = job.ramp;
    const NoiseSchedule schedule(ramp, split.train.size(), derive_seed(job.seed, kScheduleStream));
    const Variant val_variant = job.ramp ? Variant::Noisy : job.variant;

    int start = 0;
    if (job.resume) {
        const ModelFile f = read_model(*job.resume);
        r.model.import_tensors(f.tensors);
        restore_optimizer(r, f);
        for (const auto& h : f.training.at("history")) r.history.push_back(epoch_metrics_from_json(h));
        r.steps = f.training.at("steps").get<std::uint64_t>();
        r.initial_mean_det = f.training.at("initial_mean_det").get<double>();
        start = static_cast<int>(r.history.size());
    } else if (job.head == HeadKind::MvnNll) {
        r.initial_mean_det = validate(r.model, data, split.validation, val_variant).mean_det;
    }

    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    for (int epoch = start; epoch < job.epochs; ++epoch) {
        const std::vector<std::size_t> perm = seeded_permutation(split.train.size(), derive_seed(job.seed, {kEpochStream, static_cast<std::uint64_t>(epoch)}));
        double loss_sum = 0.0;
        std::size_t seen = 0;
        try {
            for (std::size_t lo = 0; lo + 2 <= perm.size(); lo += batch) {
                const std::size_t hi = std::min(perm.size(), lo + batch);
                if (hi - lo < 2) break;
                std::vector<std::span<const float>> stamps;
                std::vector<const DatasetRecord*> recs;
                for (std::size_t i = lo; i < hi; ++i) {
                    const std::size_t pos = perm[i];
                    const DatasetRecord& rec = data.records[split.train[pos]];
                    const Variant v = job.ramp ? (schedule.is_noisy(pos, epoch) ? Variant::Noisy : Variant::Clean)
                                               : job.variant;
                    stamps.push_back(pixels(rec, v));
                    recs.push_back(&rec);
                }
                const nn::ForwardContext ctx{nn::Mode::Train, derive_seed(job.seed, {kStepStream, r.steps}), {}};
                r.model.zero_grad();
                const nn::Tensor<float> y = r.model.forward(make_input_batch<float>(stamps, r.model.arch()), ctx);
                BatchLoss bl = batch_loss(y, recs, job.head, floor);
                if (!std::isfinite(bl.total)) throw NumericError("non-finite training loss");
                r.model.backward(bl.grad);
                r.optimizer.step(r.model.params());
                ++r.steps;
                loss_sum += bl.total;
                seen += recs.size();
            }
        } catch (const NumericError& e) {
            throw DivergenceError(std::string("training diverged: ") + e.what(), epoch);
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.noisy_fraction = schedule.fraction(epoch);
        m.train_loss = loss_sum / static_cast<double>(seen);
        ValStats vs;
        try {
            vs = validate(r.model, data, split.validation, val_variant);
        } catch (const NumericError& e) {
            throw DivergenceError(std::string("validation diverged: ") + e.what(), epoch);
        }
        m.val_loss = vs.loss;
        m.val_mean_det = vs.mean_det;
        m.val_rms_z1 = vs.rms_z1;
        m.val_rms_z2 = vs.rms_z2;
        r.history.push_back(m);
        if (job.on_epoch) job.on_epoch(m);

        if (!std::isfinite(m.val_loss) || !std::isfinite(m.train_loss))
            throw DivergenceError("non-finite loss", epoch);
        if (epoch > cfg.divergence_ref_epoch) {
            const double ref = r.history[static_cast<std::size_t>(cfg.divergence_ref_epoch)].val_loss;
            if (m.val_loss - ref > (cfg.divergence_factor - 1.0) * std::fabs(ref))
                throw DivergenceError("validation loss " + std::to_string(m.val_loss) + " exceeds " +
                                          std::to_string(cfg.divergence_factor) + "x its epoch-" +
                                          std::to_string(cfg.divergence_ref_epoch) + " value " + std::to_string(ref),
                                      epoch);
        }

        const bool last = epoch + 1 == job.epochs || epoch + 1 == job.stop_after;
        if (job.checkpoint && job.checkpoint_every > 0 && ((epoch + 1) % job.checkpoint_every == 0 || last))
            save_checkpoint(r, {{"seed", job.seed}}, *job.checkpoint);
        if (epoch + 1 == job.stop_after) break;
    }
    return r;
}

TrainResult train_stage1(const Dataset& data, const RunConfig& cfg, TrainJob job) {
    Network<float> net(cfg.arch, HeadKind::PlainL2);
    net.initialize(derive_seed(job.seed, 1));
    job.head = HeadKind::PlainL2;
    return run_training(std::move(net), data, cfg.train, job);
}

TrainResult train_stage2(Network<float>& stage1, const Dataset& data, const RunConfig& cfg, TrainJob job) {
    if (stage1.head_kind() != HeadKind::PlainL2) throw ContractError("stage 2 starts from a plain-L2 model");
    Network<float> net(cfg.arch, HeadKind::MvnNll);
    net.initialize(derive_seed(job.seed, 1));
    transfer_trunk(stage1, net, derive_seed(job.seed, 2));

    std::vector<std::span<const float>> probe;
    for (std::size_t i = 0; i < std::min<std::size_t>(8, data.records.size()); ++i) probe.push_back(data.records[i].clean);
    const nn::Tensor<float> x = make_input_batch<float>(probe, cfg.arch);
    const nn::ForwardContext ctx{nn::Mode::EvalDeterministic, 0, {}};
    if (!(stage1.forward_trunk(x, ctx) == net.forward_trunk(x, ctx)))
        throw MismatchError("trunk features differ after transfer");

    job.head = HeadKind::MvnNll;
    job.ramp = false;
    return run_training(std::move(net), data, cfg.train, job);
}

int ProbeResult::diverged() const {
    return static_cast<int>(std::count_if(runs.begin(), runs.end(), [](const ProbeRun& r) { return r.diverged; }));
}

ProbeResult probe_cotrain(const Dataset& data, const RunConfig& cfg, std::size_t max_records) {
    ProbeResult out;
    std::vector<std::size_t> subset(std::min(max_records ? max_records : data.records.size(), data.records.size()));
    std::iota(subset.begin(), subset.end(), std::size_t{0});
    for (int s = 0; s < cfg.train.probe_seeds; ++s) {
        ProbeRun run;
        run.seed = derive_seed(cfg.train.seed, {kProbeStream, static_cast<std::uint64_t>(s)});
        Network<float> net(cfg.arch, HeadKind::MvnNll);
        net.initialize(run.seed);
        TrainJob job;
        job.head = HeadKind::MvnNll;
        job.epochs = cfg.train.probe_epochs;
        job.lr = cfg.train.lr;
        job.variant = Variant::Noisy;
        job.seed = run.seed;
        job.subset = subset;
        try {
            TrainResult r = run_training(std::move(net), data, cfg.train, job);
            run.final_val_loss = r.history.back().val_loss;
        } catch (const DivergenceError& e) {
            run.diverged = true;
            run.epoch = e.epoch();
            run.reason = e.what();
        }
        out.runs.push_back(run);
    }
    return out;
}

}  // namespace galbnn
