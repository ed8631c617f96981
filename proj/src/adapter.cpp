#include "pema/adapter.h"

#include <chrono>
#include <cmath>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "pema/binary_io.h"
#include "pema/errors.h"
#include "pema/log.h"
#include "pema/random.h"

namespace pema {

namespace {

constexpr std::string_view kMagic = "PADP";
constexpr std::uint16_t kVersion = 1;

using RecordRefs = std::vector<const ContextRecord*>;

std::size_t distinct_sentences(const RecordRefs& refs) {
  std::unordered_set<std::uint32_t> ids;
  for (const auto* r : refs) ids.insert(r->sentence_id);
  return ids.size();
}

void check_kappa(double kappa) {
  if (!(kappa >= 0.0 && kappa <= 1.0)) {
    throw ConfigError("kappa must lie in [0, 1], got " + std::to_string(kappa));
  }
}

void check_record(const AdapterWeights& w, const ContextRecord& rec) {
  if (rec.representation.size() != w.d()) {
    throw DimensionError("record width " + std::to_string(rec.representation.size()) +
                         " does not match adapter width " + std::to_string(w.d()));
  }
}

// Loss and (optionally) gradient accumulation over a batch. A null head
// skips the prediction path entirely (phase 1).
AdapterLosses accumulate(const AdapterWeights& w, const RecordRefs& batch, const Matrix* head,
                         double kappa, AdapterGradients* grads) {
  if (batch.empty()) throw InputError("empty adapter batch");
  check_kappa(kappa);
  const bool with_pd = head != nullptr;
  if (with_pd && head->cols() != w.d()) {
    throw DimensionError("head " + head->shape_string() + " does not match adapter width " +
                         std::to_string(w.d()));
  }
  const double n = static_cast<double>(distinct_sentences(batch));
  const double rct_scale = kappa * 2.0 / n;
  const double pd_scale = (1.0 - kappa) / n;

  double rct_sum = 0.0;
  double pd_sum = 0.0;
  std::vector<double> f(w.d());
  for (const ContextRecord* rec : batch) {
    check_record(w, *rec);
    std::copy(rec->representation.begin(), rec->representation.end(), f.begin());
    const auto out = adapter_forward(w, f);
    rct_sum += mse(out.h_rct, f);

    std::vector<double> g_logits;
    if (with_pd) {
      const auto dist = softmax(matvec(*head, out.h_pd));
      pd_sum += cross_entropy(dist, rec->target);
      if (grads) {
        g_logits.assign(dist.probs().begin(), dist.probs().end());
        g_logits[rec->target] -= 1.0;
        for (double& g : g_logits) g *= pd_scale;
      }
    }
    if (!grads) continue;

    std::vector<double> g_hrct(f.size());
    for (std::size_t j = 0; j < f.size(); ++j) g_hrct[j] = rct_scale * (out.h_rct[j] - f[j]);
    add_outer(grads->b_rct, 1.0, g_hrct, out.z);
    auto g_z = matvec_transposed(w.b_rct, g_hrct);
    if (with_pd && pd_scale != 0.0) {
      const auto g_hpd = matvec_transposed(*head, g_logits);
      add_outer(grads->b_pd, 1.0, g_hpd, out.z);
      const auto g_z_pd = matvec_transposed(w.b_pd, g_hpd);
      for (std::size_t j = 0; j < g_z.size(); ++j) g_z[j] += g_z_pd[j];
    }
    add_outer(grads->a, 1.0, g_z, f);
  }

  AdapterLosses losses;
  losses.rct = rct_sum / n;
  losses.pd = with_pd ? pd_sum / n : 0.0;
  losses.total = kappa * losses.rct + (1.0 - kappa) * losses.pd;
  if (grads) grads->losses = losses;
  return losses;
}

RecordRefs all_refs(std::span<const ContextRecord> records) {
  RecordRefs refs;
  refs.reserve(records.size());
  for (const auto& r : records) refs.push_back(&r);
  return refs;
}

AdapterGradients zero_grads(const AdapterWeights& w) {
  AdapterGradients g;
  g.a = Matrix(w.a.rows(), w.a.cols());
  g.b_rct = Matrix(w.b_rct.rows(), w.b_rct.cols());
  g.b_pd = Matrix(w.b_pd.rows(), w.b_pd.cols());
  return g;
}

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (double& x : m.data()) x = rng.normal(0.0, stddev);
  return m;
}

// Sentence-whole minibatches of roughly `batch_tokens` records each.
std::vector<RecordRefs> make_batches(const ExternalMemory& memory,
                                     const std::vector<std::vector<std::size_t>>& groups,
                                     std::vector<std::size_t>& order, std::size_t batch_tokens,
                                     Rng& rng) {
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<RecordRefs> batches;
  RecordRefs current;
  for (std::size_t g : order) {
    for (std::size_t idx : groups[g]) current.push_back(&memory.records[idx]);
    if (current.size() >= batch_tokens) {
      batches.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

struct LoopState {
  TrainReport report;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

// Shared epoch loop. `step` performs one update on a batch; `evaluate`
// produces the full-memory losses logged after each epoch.
template <typename Step, typename Evaluate>
void run_epochs(const ExternalMemory& memory, const TrainConfig& config, std::size_t epochs,
                std::uint64_t shuffle_seed, Step&& step, Evaluate&& evaluate, LoopState& state) {
  const auto groups = sentence_groups(memory.records);
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(shuffle_seed);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    bool capped = false;
    for (const auto& batch : make_batches(memory, groups, order, config.batch_tokens, rng)) {
      if (config.max_steps != 0 && state.report.steps >= config.max_steps) {
        capped = true;
        break;
      }
      step(batch);
      ++state.report.steps;
    }
    const AdapterLosses l = evaluate();
    if (!std::isfinite(l.total)) {
      throw NumericInputError("adapter loss diverged at epoch " + std::to_string(epoch + 1));
    }
    state.report.epochs.push_back({epoch + 1, l.rct, l.pd, l.total});
    log::debug("kappa " + std::to_string(state.report.kappa) + " epoch " +
               std::to_string(epoch + 1) + ": rct " + std::to_string(l.rct) + ", pd " +
               std::to_string(l.pd) + ", total " + std::to_string(l.total));
    if (capped || (config.max_steps != 0 && state.report.steps >= config.max_steps)) break;
  }
  state.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - state.start).count();
}

}  // namespace

void AdapterWeights::validate(bool allow_full_rank) const {
  const std::size_t dd = d();
  const std::size_t rr = r();
  if (b_rct.rows() != dd || b_rct.cols() != rr || b_pd.rows() != dd || b_pd.cols() != rr) {
    throw DimensionError("adapter shapes disagree: A " + a.shape_string() + ", B_rct " +
                         b_rct.shape_string() + ", B_pd " + b_pd.shape_string());
  }
  if (rr == 0 || (allow_full_rank ? rr > dd : rr >= dd)) {
    throw DimensionError("adapter rank " + std::to_string(rr) + " must satisfy 0 < r < d = " +
                         std::to_string(dd));
  }
  if (!a.all_finite() || !b_rct.all_finite() || !b_pd.all_finite()) {
    throw NumericInputError("adapter weights contain non-finite values");
  }
}

std::uint64_t AdapterWeights::checksum() const {
  std::uint64_t h = float32_checksum(a.data());
  h = float32_checksum(b_rct.data(), h);
  return float32_checksum(b_pd.data(), h);
}

void AdapterWeights::save(const std::string& path) const {
  validate();
  binio::Writer w(path);
  w.magic(kMagic);
  w.u16(kVersion);
  w.u32(static_cast<std::uint32_t>(d()));
  w.u32(static_cast<std::uint32_t>(r()));
  w.u32(static_cast<std::uint32_t>(v));
  w.f32_block(a.data());
  w.f32_block(b_rct.data());
  w.f32_block(b_pd.data());
  w.finish(path);
}

AdapterWeights AdapterWeights::load(const std::string& path) {
  binio::Reader r(path);
  r.expect_magic(kMagic, "PADP magic");
  const auto version = r.u16("PADP version");
  if (version != kVersion) {
    throw FormatError("unsupported PADP version " + std::to_string(version), r.offset() - 2);
  }
  const std::uint64_t dims_at = r.offset();
  const auto d = r.u32("d");
  const auto rank = r.u32("r");
  const auto v = r.u32("v");
  if (d == 0 || d > (1u << 16)) throw FormatError("implausible adapter width", dims_at);
  if (rank == 0 || rank >= d) {
    throw FormatError("adapter rank " + std::to_string(rank) + " must satisfy 0 < r < d = " +
                          std::to_string(d),
                      dims_at + 4);
  }
  AdapterWeights w;
  w.v = v;
  w.a = Matrix(rank, d);
  w.b_rct = Matrix(d, rank);
  w.b_pd = Matrix(d, rank);
  r.f32_block(w.a.data(), "A");
  r.f32_block(w.b_rct.data(), "B_rct");
  r.f32_block(w.b_pd.data(), "B_pd");
  if (!r.at_end()) throw FormatError("trailing bytes after PADP blocks", r.offset());
  if (!w.a.all_finite() || !w.b_rct.all_finite() || !w.b_pd.all_finite()) {
    throw FormatError("non-finite adapter weight", r.offset());
  }
  return w;
}

AdapterOutputs adapter_forward(const AdapterWeights& w, std::span<const double> f) {
  if (f.size() != w.d()) {
    throw DimensionError("representation width " + std::to_string(f.size()) +
                         " does not match adapter width " + std::to_string(w.d()));
  }
  AdapterOutputs out;
  out.z = matvec(w.a, f);
  out.h_rct = matvec(w.b_rct, out.z);
  out.h_pd = matvec(w.b_pd, out.z);
  return out;
}

TokenDistribution pema_dist(const AdapterWeights& w, std::span<const double> f,
                            const Matrix& head) {
  if (f.size() != w.d()) {
    throw DimensionError("representation width " + std::to_string(f.size()) +
                         " does not match adapter width " + std::to_string(w.d()));
  }
  const auto h_pd = matvec(w.b_pd, matvec(w.a, f));
  return softmax(matvec(head, h_pd));
}

AdapterLosses adapter_losses(const AdapterWeights& w, std::span<const ContextRecord> batch,
                             const Matrix& head, double kappa) {
  return accumulate(w, all_refs(batch), &head, kappa, nullptr);
}

AdapterGradients adapter_grads(const AdapterWeights& w, std::span<const ContextRecord> batch,
                               const Matrix& head, double kappa) {
  AdapterGradients g = zero_grads(w);
  accumulate(w, all_refs(batch), &head, kappa, &g);
  return g;
}

void TrainConfig::validate() const {
  check_kappa(kappa);
  if (rank == 0) throw ConfigError("adapter rank must be positive");
  if (batch_tokens == 0) throw ConfigError("batch size must be positive");
  if (!(adam.lr > 0.0) || !(adam.eps > 0.0) || !(adam.beta1 > 0.0 && adam.beta1 < 1.0) ||
      !(adam.beta2 > 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("invalid Adam hyperparameters");
  }
}

std::vector<std::vector<std::size_t>> sentence_groups(std::span<const ContextRecord> records) {
  std::vector<std::vector<std::size_t>> groups;
  std::unordered_map<std::uint32_t, std::size_t> slot;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto [it, inserted] = slot.emplace(records[i].sentence_id, groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(i);
  }
  return groups;
}

Phase1Result train_phase1(const ExternalMemory& memory, const TrainConfig& config) {
  config.validate();
  if (memory.records.empty()) throw InputError("cannot train on an empty external memory");
  const std::size_t d = memory.d;
  if (config.rank >= d) {
    throw DimensionError("adapter rank " + std::to_string(config.rank) +
                         " must be below the representation width " + std::to_string(d));
  }

  Rng init(config.seed ^ 0x1111);
  AdapterWeights w;
  w.v = memory.v;
  w.a = gaussian(config.rank, d, 1.0 / std::sqrt(static_cast<double>(d)), init);
  w.b_rct = Matrix(d, config.rank);
  w.b_pd = Matrix(d, config.rank);

  AdamState adam_a(config.adam, w.a.rows(), w.a.cols());
  AdamState adam_b(config.adam, w.b_rct.rows(), w.b_rct.cols());
  const RecordRefs everything = all_refs(memory.records);

  LoopState state;
  state.report.kappa = 1.0;
  run_epochs(
      memory, config, config.phase1_epochs, config.seed ^ 0x2222,
      [&](const RecordRefs& batch) {
        AdapterGradients g = zero_grads(w);
        accumulate(w, batch, nullptr, 1.0, &g);
        adam_step(w.a, g.a, adam_a);
        adam_step(w.b_rct, g.b_rct, adam_b);
      },
      [&] { return accumulate(w, everything, nullptr, 1.0, nullptr); }, state);

  w.b_rct.round_to_float();
  state.report.checksum = float32_checksum(w.b_rct.data());
  return {std::move(w.b_rct), std::move(state.report)};
}

Phase2Result train_phase2(const ExternalMemory& memory, const Matrix& b_rct, const Matrix& head,
                          const TrainConfig& config) {
  config.validate();
  if (memory.records.empty()) throw InputError("cannot train on an empty external memory");
  const std::size_t d = memory.d;
  if (b_rct.rows() != d || b_rct.cols() != config.rank) {
    throw DimensionError("phase-1 B_rct " + b_rct.shape_string() + " does not match d=" +
                         std::to_string(d) + ", r=" + std::to_string(config.rank));
  }
  if (head.cols() != d) {
    throw DimensionError("head " + head.shape_string() + " does not match width " +
                         std::to_string(d));
  }

  Rng init(config.seed ^ 0x3333);
  AdapterWeights w;
  w.v = head.rows();
  w.a = gaussian(config.rank, d, 1.0 / std::sqrt(static_cast<double>(d)), init);
  w.b_rct = b_rct;
  w.b_pd = Matrix(d, config.rank);
  w.validate();

  AdamState adam_a(config.adam, w.a.rows(), w.a.cols());
  AdamState adam_rct(config.adam, w.b_rct.rows(), w.b_rct.cols());
  AdamState adam_pd(config.adam, w.b_pd.rows(), w.b_pd.cols());
  const RecordRefs everything = all_refs(memory.records);

  LoopState state;
  state.report.kappa = config.kappa;
  run_epochs(
      memory, config, config.phase2_epochs, config.seed ^ 0x4444,
      [&](const RecordRefs& batch) {
        AdapterGradients g = zero_grads(w);
        accumulate(w, batch, &head, config.kappa, &g);
        adam_step(w.a, g.a, adam_a);
        if (!config.freeze_brct_in_phase2) adam_step(w.b_rct, g.b_rct, adam_rct);
        adam_step(w.b_pd, g.b_pd, adam_pd);
      },
      [&] { return accumulate(w, everything, &head, config.kappa, nullptr); }, state);

  w.a.round_to_float();
  w.b_rct.round_to_float();
  w.b_pd.round_to_float();
  state.report.checksum = w.checksum();
  return {std::move(w), std::move(state.report)};
}

}  // namespace pema
