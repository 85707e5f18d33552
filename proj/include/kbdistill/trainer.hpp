#pragma once

// Training loop, optimizer, label dropout, grid search and checkpoints.

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kbdistill/losses.hpp"
#include "kbdistill/metrics.hpp"

namespace kbd {

struct TrainConfig {
  double learning_rate = 2.5e-4;
  int hops = 3;
  double dld_rate = 0.0;
  double dropout = 0.2;
  double teacher_forcing = 0.9;
  std::size_t emb_dim = 200;
  std::size_t hid_dim = 200;
  std::size_t dec_dim = 100;
  std::size_t att_dim = 100;
  Scorer scorer = Scorer::pairwise;
  bool unique_history_words = false;
  bool use_l_ec = true;
  bool use_l_d = true;
  bool average_l_ec = false;
  double weight_g = 1.0;
  double weight_c = 1.0;
  double weight_d = 1.0;
  double weight_ec = 1.0;
  std::size_t max_ec_pairs = 10000;
  std::uint64_t seed = 1;
  int epochs = 50;
  int patience = 10;
  std::size_t batch_size = 32;
  double clip_norm = 5.0;
  std::size_t max_decode_len = 50;
  bool strict_grid = false;
  bool parallel = true;
  std::string format = "smd_json";
  std::string pretrained;  // optional word-vector text file

  /// Range checks; with strict_grid also grid membership.
  void validate() const;
  /// Keys whose values lie outside the declared search grids.
  std::vector<std::string> off_grid() const;
  ModelConfig model_config(std::size_t vocab_size) const;
  Exec exec() const { return parallel ? Exec::parallel : Exec::serial; }

  /// "key = value" lines; '#' starts a comment. Unknown keys are a ConfigError.
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
  std::string to_text() const;
  void set(const std::string& key, const std::string& value);
};

/// Adam with bias correction.
class Adam {
 public:
  Adam(const ParamStore& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step(ParamStore& store, const GradBuffer& grads);
  std::size_t steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<Vec> m_, v_;
};

/// Rescales grads so their global norm is at most max_norm; returns the prior norm.
Real clip_grad_norm(GradBuffer& grads, Real max_norm);

/// Replaces each tag position (sketch != response) by the surface entity with
/// probability `rate`, independently per position.
template <class T>
std::vector<T> apply_dld(const std::vector<T>& sketch, const std::vector<T>& response,
                         double rate, std::mt19937_64& rng) {
  std::vector<T> out = sketch;
  std::bernoulli_distribution drop(rate);
  for (std::size_t i = 0; i < out.size() && i < response.size(); ++i) {
    if (sketch[i] != response[i] && drop(rng)) out[i] = response[i];
  }
  return out;
}

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  TrainConfig config;
  Model model;
  Vocabulary vocab;
  EntityLexicon lexicon;
  int epoch = 0;
  double val_mse_f1 = 0.0;  // in [0, 1]

  /// Writes <dir>/model.bin and <dir>/model.json.
  void save(const std::filesystem::path& dir) const;
  /// Throws ArtifactMismatch when blob and sidecar disagree.
  static Checkpoint load(const std::filesystem::path& dir);
};

/// Deterministic, teacher-forced, dropout-free loss over samples (batch mean
/// of L_g + L_c + L_d, plus L_ec over all their KB entities).
LossBreakdown evaluate_loss(const Model& model, const TrainConfig& config,
                            const std::vector<DialogSample>& samples, const Vocabulary& vocab,
                            const EntityLexicon& lexicon);

struct Evaluation {
  MetricReport report;
  std::vector<Tokens> predictions;  // resolved responses
  std::vector<Tokens> sketches;
};

Evaluation evaluate(const Model& model, const std::vector<DialogSample>& samples,
                    const Vocabulary& vocab, const EntityLexicon& lexicon,
                    std::size_t max_decode_len, Exec exec = Exec::serial);

struct EpochLog {
  int epoch = 0;
  LossBreakdown loss;  // mean over batches
  double val_mse_f1 = 0.0;
  double val_bleu = 0.0;
  bool improved = false;
  nlohmann::json to_json() const;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> history;
  std::vector<double> batch_losses;
};

/// Trains from `config`. When `val` is empty the training set is used for
/// model selection. `on_epoch` is called after every epoch.
TrainResult train(const TrainConfig& config, const std::vector<DialogSample>& train_set,
                  const std::vector<DialogSample>& val, const Vocabulary& vocab,
                  const EntityLexicon& lexicon,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

struct GridSpec {
  std::vector<double> learning_rates;
  std::vector<int> hops;
  std::vector<double> dld_rates;
  int runs_per_cell = 1;
  bool select_best_of = false;  // max over runs instead of the mean
};

struct GridRow {
  double learning_rate = 0.0;
  int hops = 0;
  double dld_rate = 0.0;
  std::vector<double> run_mse_f1;
  double mean = 0.0;
  double best = 0.0;
};

struct GridResult {
  std::vector<GridRow> rows;
  std::size_t best_row = 0;
  TrainConfig best_config;
  nlohmann::json to_json() const;
};

GridResult grid_search(const TrainConfig& base, const GridSpec& grid,
                       const std::vector<DialogSample>& train_set,
                       const std::vector<DialogSample>& val, const Vocabulary& vocab,
                       const EntityLexicon& lexicon);

}  // namespace kbd
