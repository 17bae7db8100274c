#pragma once

// Small deterministic objects stored under tests/golden. The dataset and model
// fixtures use exactly representable constants only; the prediction fixture
// also goes through the softplus link.

#include "galbnn/bayes.hpp"
#include "galbnn/store.hpp"

#include <cstdint>

namespace galbnn::golden {

inline Dataset dataset() {
    Dataset ds;
    ds.header.height = 16;
    ds.header.width = 16;
    ds.header.count = 2;
    ds.header.category = Category::BlendNoisy;
    ds.header.sim_config_hash = "0123456789abcdef";
    ds.header.base_seed = 0x1122334455667788ULL;
    ds.header.has_noisy = true;
    ds.header.config_hash = "fedcba9876543210";
    for (int r = 0; r < 2; ++r) {
        DatasetRecord rec;
        rec.label = {0.25 - 0.5 * r, -0.125};
        rec.scene.seed = 1000 + r;
        rec.scene.label = rec.label;
        rec.scene.central = {Profile::EllipticalGaussian, 5000.0, 2.5, 0.5, 0.75, 0.0, 0.0};
        rec.scene.noise = {true, 100.0, 77ULL + r};
        if (r == 1) {
            rec.scene.companions.push_back({Profile::Exponential, 2500.0, 1.5, 0.875, 2.0, 4.5, -3.25});
            rec.is_blend = true;
            rec.n_companions = 1;
        }
        for (int i = 0; i < 256; ++i) {
            rec.clean.push_back(static_cast<float>((i * 7 + r * 3) % 101) * 0.25f);
            rec.noisy.push_back(static_cast<float>((i * 13 + r) % 97) - 48.0f);
        }
        ds.records.push_back(rec);
    }
    return ds;
}

inline ModelFile model() {
    ModelFile m;
    m.architecture = {{"config", {{"stamp_size", 16}}}, {"head", "mvn-nll"}};
    m.tensors.push_back({"trunk.0.conv.weight", {2, 1, 3, 3}, {}});
    for (int i = 0; i < 18; ++i) m.tensors.back().data.push_back(static_cast<float>(i - 9) * 0.0625f);
    m.tensors.push_back({"trunk.0.conv.bias", {2}, {0.5f, -0.5f}});
    m.optimizer.push_back({"adam.m.trunk.0.conv.bias", {2}, {1e-3f, -2e-3f}});
    m.optimizer.push_back({"adam.v.trunk.0.conv.bias", {2}, {1e-6f, 4e-6f}});
    m.training = {{"adam_steps", 3}, {"epochs_completed", 1}, {"lr", 0.001}};
    m.manifest_hash = "00112233aabbccdd";
    return m;
}

inline std::vector<double> prediction_raw(int record) {
    std::vector<double> raw;
    for (int k = 0; k < 3; ++k) {
        raw.push_back(0.125 * (k - 1) + 0.0625 * record);
        raw.push_back(-0.25 + 0.03125 * k);
        raw.push_back(-1.0 + 0.5 * k);
        raw.push_back(0.015625 * (k + record));
        raw.push_back(-2.0 + 0.25 * k);
    }
    return raw;
}

inline constexpr double kPredictionFloor = 1e-3;

inline PredictionFile predictions() {
    PredictionFile p;
    p.header = {{"mc_samples", 3}, {"sigma_floor", kPredictionFloor}, {"variant", "noisy"}};
    for (int r = 0; r < 2; ++r) {
        PredictionRecord rec;
        rec.record_index = static_cast<std::uint64_t>(r);
        rec.base_seed = 40 + r;
        rec.k = 3;
        rec.raw = prediction_raw(r);
        const UncertaintySplit s = decompose(ensemble_from_raw(rec.raw, kPredictionFloor, rec.base_seed));
        rec.mu_bar = s.mu_bar;
        rec.sigma_aleat = s.sigma_aleat;
        rec.sigma_epist = s.sigma_epist;
        rec.sigma_pred = s.sigma_pred;
        rec.u_aleat = s.u_aleat;
        rec.u_epist = s.u_epist;
        rec.u_pred = s.u_pred;
        p.records.push_back(rec);
    }
    return p;
}

}  // namespace galbnn::golden
