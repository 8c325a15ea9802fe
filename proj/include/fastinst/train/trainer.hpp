#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fastinst/core/parallel.hpp"
#include "fastinst/data/augment.hpp"
#include "fastinst/loss/losses.hpp"
#include "fastinst/model/fastinst.hpp"
#include "fastinst/train/checkpoint.hpp"
#include "fastinst/train/evaluate.hpp"
#include "fastinst/train/optim.hpp"
#include "fastinst/train/postprocess.hpp"

namespace fastinst {

/// Raised when the loss or a gradient becomes non-finite.
class TrainingAborted : public std::runtime_error {
   public:
    TrainingAborted(const std::string& what, std::string last_good) : std::runtime_error(what), last_good_checkpoint(std::move(last_good)) {}
    std::string last_good_checkpoint;
};

/// Dataset indices of one batch: a fresh permutation per epoch, so batch
/// composition depends only on (seed, iteration).
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::size_t iter, std::size_t batch, std::size_t n) {
    std::vector<std::size_t> out;
    std::size_t cached_epoch = static_cast<std::size_t>(-1);
    std::vector<std::size_t> perm(n);
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t pos = iter * batch + b, epoch = pos / n;
        if (epoch != cached_epoch) {
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            auto rng = Rng::split(seed, "batch-order", epoch);
            for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
            cached_epoch = epoch;
        }
        out.push_back(perm[pos % n]);
    }
    return out;
}

template <typename T>
std::vector<Detection> predict(const FastInstModel<T>& model, const Tensor<T>& image) {
    NoGradGuard no_grad;
    auto out = model.forward(image);
    return postprocess(out.final_prediction(), out.e3_h, out.e3_w, out.image_h, out.image_w);
}

template <typename T>
EvalResult evaluate_model(const FastInstModel<T>& model, const std::vector<SceneSample>& samples) {
    std::vector<std::vector<Detection>> dets(samples.size());
    std::vector<std::vector<InstanceTarget>> gts;
    parallel_for(samples.size(), [&](std::size_t i) { dets[i] = predict(model, cast_tensor<T>(samples[i].image)); });
    for (const auto& s : samples) gts.push_back(s.instances);
    return evaluate(dets, gts);
}

inline nlohmann::json eval_to_json(const EvalResult& r) {
    return {{"AP", r.ap}, {"AP50", r.ap50}, {"AP75", r.ap75}, {"APs", r.ap_s}, {"APm", r.ap_m}, {"APl", r.ap_l}, {"AR100", r.ar100}};
}

struct TrainerOptions {
    TrainConfig train;
    LossConfig loss;
    AugmentConfig augment;
    std::filesystem::path out_dir;  // empty: keep everything in memory
    nlohmann::json config_echo = nlohmann::json::object();
};

template <typename T>
class Trainer {
   public:
    Trainer(FastInstModel<T>& model, std::vector<SceneSample> data, TrainerOptions opts)
        : model_(model), data_(std::move(data)), opts_(std::move(opts)) {
        opts_.train.validate();
        if (data_.empty()) throw std::invalid_argument("trainer: empty dataset");
        if (!opts_.out_dir.empty()) {
            std::filesystem::create_directories(opts_.out_dir);
            log_stream_.open(opts_.out_dir / "metrics.jsonl", std::ios::trunc);
        }
    }

    std::size_t iteration() const { return iter_; }
    const std::vector<nlohmann::json>& log() const { return log_; }
    AdamWState<T>& optimizer() { return opt_; }
    const std::string& last_checkpoint() const { return last_checkpoint_; }

    /// One optimization step on one batch; returns the logged record.
    nlohmann::json step() {
        const auto& tc = opts_.train;
        const auto rates = lr_at(iter_, tc);
        const auto idx = batch_indices(tc.seed, iter_, tc.batch_size, data_.size());
        const T inv_batch = static_cast<T>(1.0 / static_cast<double>(idx.size()));
        const std::size_t stride = level_stride(model_.config().source_level);

        model_.params().zero_grad();
        double total = 0, ia = 0, pred = 0, gt = 0, loc = 0;
        bool has_gt = false, has_loc = false;
        for (std::size_t b = 0; b < idx.size(); ++b) {
            SceneSample sample;
            if (tc.augment) {
                auto rng = Rng::split(tc.seed, "augment", iter_, b);
                sample = augment(data_[idx[b]], rng, opts_.augment);
            } else {
                sample = data_[idx[b]];
            }
            auto targets = prepare_targets<T>(sample.instances, stride);
            std::optional<LossBreakdown<T>> computed;
            try {
                auto fwd = model_.forward(cast_tensor<T>(sample.image));
                computed.emplace(total_loss(model_, fwd, targets, opts_.loss));
            } catch (const std::exception& e) {
                throw TrainingAborted(std::string(e.what()) + " at iteration " + std::to_string(iter_), last_checkpoint_);
            }
            auto& losses = *computed;
            const double value = static_cast<double>(losses.total.item());
            if (!std::isfinite(value))
                throw TrainingAborted("non-finite loss at iteration " + std::to_string(iter_), last_checkpoint_);
            scale(losses.total, inv_batch).backward();
            total += value;
            ia += losses.ia;
            pred += losses.pred;
            if (losses.gt) {
                has_gt = true;
                gt += *losses.gt;
            }
            if (losses.match_location_cost) {
                has_loc = true;
                loc += *losses.match_location_cost;
            }
        }
        try {
            adamw_step(model_.params(), opt_, scheduled_lr(rates), tc.weight_decay);
        } catch (const std::runtime_error& e) {
            throw TrainingAborted(std::string(e.what()) + " at iteration " + std::to_string(iter_), last_checkpoint_);
        }

        const double n = static_cast<double>(idx.size());
        nlohmann::json rec = {{"iter", iter_}, {"lr", rates.main}, {"lr_backbone", rates.backbone}, {"loss", total / n},
                              {"loss_ia", ia / n}, {"loss_pred", pred / n}};
        if (has_gt) rec["loss_gt"] = gt / n;
        if (has_loc) rec["match_loc_cost"] = loc / n;
        ++iter_;
        return rec;
    }

    /// Runs to `total_iters`, logging, checkpointing and evaluating on the training set as configured.
    EvalResult run(const std::function<void(const nlohmann::json&)>& on_record = {}) {
        const auto& tc = opts_.train;
        std::optional<EvalResult> last_eval;
        while (iter_ < tc.total_iters) {
            auto rec = step();
            const bool last = iter_ == tc.total_iters;
            if (last || (tc.eval_every && iter_ % tc.eval_every == 0)) {
                last_eval = evaluate_model(model_, data_);
                rec["eval"] = eval_to_json(*last_eval);
            }
            if (!opts_.out_dir.empty() && (last || (tc.checkpoint_every && iter_ % tc.checkpoint_every == 0)))
                save(opts_.out_dir / (last ? std::string("final.ckpt") : "iter_" + std::to_string(iter_) + ".ckpt"));
            if (last || tc.log_every <= 1 || (iter_ - 1) % tc.log_every == 0) emit(rec, on_record);
        }
        if (!last_eval) last_eval = evaluate_model(model_, data_);
        return *last_eval;
    }

    void save(const std::filesystem::path& path) {
        nlohmann::json cfg = opts_.config_echo;
        cfg["__iteration"] = iter_;
        save_checkpoint(path, make_checkpoint(model_.params(), &opt_, cfg));
        last_checkpoint_ = path.string();
    }

   private:
    void emit(const nlohmann::json& rec, const std::function<void(const nlohmann::json&)>& on_record) {
        log_.push_back(rec);
        if (log_stream_.is_open()) {
            log_stream_ << rec.dump() << '\n';
            log_stream_.flush();
        }
        if (on_record) on_record(rec);
    }

    FastInstModel<T>& model_;
    std::vector<SceneSample> data_;
    TrainerOptions opts_;
    AdamWState<T> opt_;
    std::size_t iter_ = 0;
    std::vector<nlohmann::json> log_;
    std::ofstream log_stream_;
    std::string last_checkpoint_;
};

}  // namespace fastinst
