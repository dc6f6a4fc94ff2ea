#include "phg2st/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace phg2st {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !(decay > 0.0) || step_size < 1) throw ConfigError("lr, decay and step_size must be positive");
  if (max_epochs < 0 || patience < 0) throw ConfigError("max_epochs and patience must be non-negative");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (k_hyper < 1) throw ConfigError("k_hyper must be >= 1");
  for (double r : {train_prompt_ratio, eval_prompt_ratio})
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("prompt ratios must lie in [0, 1]");
}

void adam_step(std::span<const std::pair<std::string, Tensor>> params, AdamState& state, double lr) {
  if (state.first.empty()) {
    for (const auto& [name, t] : params) {
      state.first.push_back(Matrix::Zero(t.rows(), t.cols()));
      state.second.push_back(Matrix::Zero(t.rows(), t.cols()));
    }
  }
  if (state.first.size() != params.size()) throw ContractError("adam_step: state does not match parameter list");
  for (const auto& [name, t] : params)
    if (t.has_grad() && !t.grad().allFinite()) throw NumericalError("non-finite gradient in parameter " + name);

  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    if (!p.has_grad()) continue;
    const Matrix g = p.grad();
    Matrix& m = state.first[i];
    Matrix& v = state.second[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseAbs2();
    p.mutable_value().array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
  }
}

double lr_at(Index epoch, const TrainConfig& cfg) {
  return cfg.lr * std::pow(cfg.decay, static_cast<double>(epoch / cfg.step_size));
}

Scores evaluate_slides(const ModelParams& params, const ModelConfig& cfg, std::span<const PreparedSlide> slides,
                       double prompt_ratio, std::uint64_t seed) {
  Scores mean;
  if (slides.empty()) return mean;
  for (const auto& s : slides) {
    const Scores sc = evaluate_slide(params, cfg, s, prompt_ratio, seed).unprompted;
    mean.mae += sc.mae;
    mean.pcc += sc.pcc;
    mean.ccc += sc.ccc;
  }
  const auto k = static_cast<double>(slides.size());
  return {mean.mae / k, mean.pcc / k, mean.ccc / k};
}

FitResult fit(std::span<const PreparedSlide> train, std::span<const PreparedSlide> val, const ModelConfig& model_cfg,
              const TrainConfig& cfg, std::optional<ResumeState> resume, const EpochCallback& on_epoch) {
  if (train.empty()) throw ConfigError("fit: no training slides");
  if (val.empty()) throw ConfigError("fit: no validation slides");
  cfg.validate();
  model_cfg.validate();

  FitResult result;
  ModelParams params = resume ? std::move(resume->params) : init_params(model_cfg, cfg.seed);
  if (!resume) {
    // Heads start at the per-gene training mean so early steps fit spatial
    // structure rather than the log-expression offset.
    Vector mean = Vector::Zero(model_cfg.genes);
    Index spots = 0;
    for (const auto& s : train) {
      if (s.expression.cols() != model_cfg.genes)
        throw DimensionError("fit: slide " + s.slide_id + " has " + std::to_string(s.expression.cols()) +
                             " genes, model expects " + std::to_string(model_cfg.genes));
      mean += s.expression.colwise().sum().transpose();
      spots += s.n;
    }
    mean /= static_cast<double>(std::max<Index>(spots, 1));
    for (const Linear* head : {&params.spot_head, &params.neighbor_head, &params.fused_head})
      head->bias.mutable_value() = mean.transpose();
  }
  AdamState adam = resume ? std::move(resume->adam) : AdamState{};
  const Index first_epoch = resume ? resume->next_epoch : 0;
  result.best = params.clone();

  const auto named = params.named_parameters();
  const Rng root(cfg.seed);
  const std::uint64_t eval_seed = root.split(0xe7a1).next_u64();
  std::vector<Tensor> targets;
  for (const auto& s : train) targets.push_back(Tensor::from_matrix(s.expression));

  Index stale = 0;
  Index epoch = first_epoch;
  for (; epoch < cfg.max_epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    Rng epoch_rng = root.split(static_cast<std::uint64_t>(epoch) + 1);
    double loss_sum = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      for (const auto& [name, t] : named) {
        Tensor handle = t;
        handle.zero_grad();
      }
      const ForwardOutputs out = forward(train[i], cfg.train_prompt_ratio, params, model_cfg, true, epoch_rng);
      const LossTerms loss = compute_loss(out, targets[i], cfg.lambda);
      const double value = loss.total.item();
      if (!std::isfinite(value))
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " on slide " + train[i].slide_id);
      backward(loss.total);
      adam_step(named, adam, lr);
      loss_sum += value;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.val = evaluate_slides(params, model_cfg, val, cfg.eval_prompt_ratio, eval_seed);
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.val.pcc > result.best_val_pcc) {
      result.best_val_pcc = rec.val.pcc;
      result.best_epoch = epoch;
      result.best = params.clone();
      stale = 0;
    } else if (++stale >= std::max<Index>(cfg.patience, 1)) {
      ++epoch;
      break;
    }
  }
  result.next_epoch = epoch;
  result.last = std::move(params);
  result.adam = std::move(adam);
  return result;
}

void write_history_csv(std::span<const EpochRecord> history, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  out << "epoch,train_loss,lr,val_pcc,val_ccc,val_mae\n";
  out.precision(10);
  for (const auto& r : history)
    out << r.epoch << ',' << r.train_loss << ',' << r.lr << ',' << r.val.pcc << ',' << r.val.ccc << ',' << r.val.mae
        << '\n';
}

}  // namespace phg2st
