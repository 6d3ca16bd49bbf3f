#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <future>
#include <string>
#include <vector>

#include "nwcrf/checkpoint.hpp"
#include "nwcrf/synth.hpp"

namespace nwcrf {

// NWCRF_THREADS caps parallel per-sample work; absent means sequential.
inline int64_t thread_cap() {
  const char* env = std::getenv("NWCRF_THREADS");
  if (!env) return 1;
  int64_t n = std::atoll(env);
  return n < 1 ? 1 : n;
}

// Runs fn(i) for i in [0, count), at most `threads` in flight; results are
// merged by index by the caller, so parallelism never changes numerics.
template <class Fn>
void parallel_for_index(int64_t count, int64_t threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (int64_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::vector<std::future<void>> workers;
  int64_t n = std::min(threads, count);
  for (int64_t t = 0; t < n; ++t)
    workers.push_back(std::async(std::launch::async, [&] {
      for (int64_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
    }));
  for (auto& w : workers) w.get();
}

struct StepLog {
  int64_t step;
  double lr;
  double loss;
};

struct EvalLog {
  int64_t step;
  MetricsReport metrics;
};

struct TrainResult {
  ModelParams params;
  AdamState adam;
  int64_t steps = 0;
  std::vector<StepLog> loss_log;
  std::vector<EvalLog> eval_log;
};

// Deterministic sample seeds: training index i uses seed+i, validation index
// j uses seed+1000000+j.
inline uint64_t train_sample_seed(uint64_t seed, int64_t index) {
  return seed + static_cast<uint64_t>(index);
}
inline uint64_t val_sample_seed(uint64_t seed, int64_t index) {
  return seed + 1000000ull + static_cast<uint64_t>(index);
}

// Forward at full resolution -> nearest upsample -> metrics against the
// original sample.
inline MetricsReport evaluate_sample(const ModelParams& params, const ModelConfig& cfg,
                                     const DepthSample& sample, double cap) {
  Tape tape;
  ModelVars vars = lift(tape, params);
  Var pred = forward(tape.constant(sample.image), vars, cfg);
  Tensor full = upsample_nearest(tape.value(pred), sample.depth.extent(0), sample.depth.extent(1));
  return evaluate(full, sample, cap);
}

inline MetricsReport evaluate_dataset(const ModelParams& params, const ModelConfig& cfg,
                                      const std::vector<DepthSample>& samples, double cap) {
  if (samples.empty()) throw ContractError("evaluate_dataset: empty dataset");
  std::vector<MetricsReport> reports(samples.size());
  parallel_for_index(static_cast<int64_t>(samples.size()), thread_cap(), [&](int64_t i) {
    reports[static_cast<size_t>(i)] =
        evaluate_sample(params, cfg, samples[static_cast<size_t>(i)], cap);
  });
  return average(reports);
}

// SILog training on procedurally generated scenes. Batches sweep the training
// set in index order; gradients are averaged over the batch (samples may be
// processed in parallel, merged in index order), followed by one Adam step at
// the linearly decayed rate. Held-out metrics are reported every
// `eval_every` steps and after the final step.
inline TrainResult train(const TrainSetup& setup,
                         const std::function<void(const StepLog&)>& on_step = {},
                         const std::function<void(const EvalLog&)>& on_eval = {}) {
  setup.validate();
  const ModelConfig& cfg = setup.model;

  std::vector<DepthSample> train_set(static_cast<size_t>(setup.data.train_count));
  std::vector<std::pair<Tensor, Tensor>> targets(train_set.size());
  parallel_for_index(setup.data.train_count, thread_cap(), [&](int64_t i) {
    train_set[static_cast<size_t>(i)] =
        synth_scene(train_sample_seed(cfg.seed, i), setup.data.image_size, setup.data.image_size);
    targets[static_cast<size_t>(i)] = downsample_target(train_set[static_cast<size_t>(i)], 4);
  });
  std::vector<DepthSample> val_set(static_cast<size_t>(setup.data.val_count));
  parallel_for_index(setup.data.val_count, thread_cap(), [&](int64_t i) {
    val_set[static_cast<size_t>(i)] =
        synth_scene(val_sample_seed(cfg.seed, i), setup.data.image_size, setup.data.image_size);
  });

  TrainResult result;
  result.params = init_model(cfg);

  std::vector<Tensor*> param_list;
  visit_params(result.params, [&](const std::string&, Tensor& t) { param_list.push_back(&t); });
  result.adam = init_adam(param_list);

  int64_t batch = setup.train.batch_size;
  for (int64_t step = 0; step < setup.train.steps; ++step) {
    std::vector<std::vector<Tensor>> grads(static_cast<size_t>(batch));
    std::vector<double> losses(static_cast<size_t>(batch), 0.0);

    parallel_for_index(batch, thread_cap(), [&](int64_t j) {
      int64_t index = (step * batch + j) % setup.data.train_count;
      const DepthSample& sample = train_set[static_cast<size_t>(index)];
      const auto& [target, valid] = targets[static_cast<size_t>(index)];
      try {
        Tape tape;
        ModelVars vars = lift(tape, result.params);
        Var pred = forward(tape.constant(sample.image), vars, cfg);
        Var loss = silog_loss(pred, target, valid);
        tape.backward(loss);
        losses[static_cast<size_t>(j)] = tape.value(loss)[0];
        std::vector<Tensor>& g = grads[static_cast<size_t>(j)];
        visit_vars(vars, [&](Var v) { g.push_back(tape.grad(v)); });
      } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(step) + ": " + e.what());
      }
    });

    // merge in sample order, average over the batch
    std::vector<Tensor> total = std::move(grads[0]);
    for (int64_t j = 1; j < batch; ++j)
      for (size_t p = 0; p < total.size(); ++p)
        for (int64_t e = 0; e < total[p].numel(); ++e)
          total[p][e] += grads[static_cast<size_t>(j)][p][e];
    double inv = 1.0 / static_cast<double>(batch);
    std::vector<const Tensor*> grad_list;
    for (Tensor& g : total) {
      for (int64_t e = 0; e < g.numel(); ++e) g[e] *= inv;
      grad_list.push_back(&g);
    }

    double lr = lr_at(step, setup.train.steps, setup.train.lr_start, setup.train.lr_end);
    adam_step(param_list, grad_list, result.adam, lr);

    double batch_loss = 0.0;
    for (double l : losses) batch_loss += l;
    batch_loss /= static_cast<double>(batch);
    StepLog log{step, lr, batch_loss};
    result.loss_log.push_back(log);
    if (on_step) on_step(log);

    bool last = step + 1 == setup.train.steps;
    if ((step + 1) % setup.train.eval_every == 0 || last) {
      EvalLog ev{step + 1, evaluate_dataset(result.params, cfg, val_set, setup.eval_cap)};
      result.eval_log.push_back(ev);
      if (on_eval) on_eval(ev);
    }
  }
  result.steps = setup.train.steps;
  return result;
}

}  // namespace nwcrf
