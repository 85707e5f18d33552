// kbdistill command-line entry point.
//
// Exit codes: 0 ok, 1 other failure, 2 usage or input error,
// 3 numeric failure, 4 artifact mismatch.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kbdistill/embedding.hpp"
#include "kbdistill/errors.hpp"
#include "kbdistill/trainer.hpp"

namespace fs = std::filesystem;
using namespace kbd;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path split_file(const fs::path& data, const std::string& split) {
  return data / (split + ".json");
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw UsageError(what + " not found: " + p.string());
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw UsageError("cannot read " + p.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

nlohmann::json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw UsageError("cannot read " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

std::string join(const Tokens& t) {
  std::string s;
  for (const auto& w : t) s += (s.empty() ? "" : " ") + w;
  return s;
}

// ------------------------------------------------------------ train

struct TrainArgs {
  std::string config, data, out;
};

int cmd_train(const TrainArgs& a) {
  require_file(a.config, "config");
  require_file(split_file(a.data, "train"), "training split");
  const TrainConfig cfg = TrainConfig::load(a.config);
  const DatasetFormat fmt = parse_format(cfg.format);

  EntityLexicon lexicon;
  if (fs::exists(fs::path(a.data) / "entities.json")) {
    lexicon.merge_entity_file(fs::path(a.data) / "entities.json");
  }
  const fs::path train_path = split_file(a.data, "train");
  const fs::path dev_path = split_file(a.data, "dev");
  const bool has_dev = fs::exists(dev_path);
  collect_kb_entities(train_path, fmt, lexicon);
  if (has_dev) collect_kb_entities(dev_path, fmt, lexicon);
  const auto train_set = load_dataset(train_path, fmt, lexicon);
  std::vector<DialogSample> dev;
  if (has_dev) dev = load_dataset(dev_path, fmt, lexicon);

  std::vector<DialogSample> all = train_set;
  all.insert(all.end(), dev.begin(), dev.end());
  const Vocabulary vocab = Vocabulary::build(all, lexicon);

  fs::create_directories(a.out);
  {
    std::ofstream resolved(fs::path(a.out) / "config.txt");
    resolved << cfg.to_text();
  }
  std::ofstream log(fs::path(a.out) / "train_log.jsonl");
  const auto off = cfg.off_grid();
  if (!off.empty()) {
    nlohmann::json note = {{"event", "overrides"}, {"keys", off}};
    log << note.dump() << "\n";
  }
  std::cerr << "training on " << train_set.size() << " samples, " << dev.size()
            << " validation samples, vocabulary " << vocab.size() << "\n";
  TrainResult r = train(cfg, train_set, dev, vocab, lexicon, [&](const EpochLog& e) {
    log << e.to_json().dump() << "\n";
    log.flush();
    std::cerr << "epoch " << e.epoch << " loss " << e.loss.total << " val mse_f1 "
              << 100.0 * e.val_mse_f1 << (e.improved ? " *" : "") << "\n";
  });
  r.best.save(fs::path(a.out) / "checkpoint");
  std::ofstream batches(fs::path(a.out) / "batch_losses.txt");
  batches.precision(17);
  for (double x : r.batch_losses) batches << x << "\n";
  std::cerr << "best epoch " << r.best.epoch << " val mse_f1 " << 100.0 * r.best.val_mse_f1
            << "\n";
  return 0;
}

// ------------------------------------------------------------ evaluate / predict

struct EvalArgs {
  std::string checkpoint, data, split = "test", out;
};

Evaluation run_eval(const EvalArgs& a, Checkpoint& ckpt) {
  if (!fs::exists(fs::path(a.checkpoint) / "model.json")) {
    throw UsageError("checkpoint not found: " + a.checkpoint);
  }
  const fs::path split = split_file(a.data, a.split);
  require_file(split, "split");
  ckpt = Checkpoint::load(a.checkpoint);
  const auto samples = load_dataset(split, parse_format(ckpt.config.format), ckpt.lexicon);
  return evaluate(ckpt.model, samples, ckpt.vocab, ckpt.lexicon, ckpt.config.max_decode_len,
                  ckpt.config.exec());
}

int cmd_evaluate(const EvalArgs& a) {
  Checkpoint ckpt;
  const Evaluation ev = run_eval(a, ckpt);
  std::cout << ev.report.to_json().dump(2) << "\n";
  return 0;
}

int cmd_predict(const EvalArgs& a) {
  Checkpoint ckpt;
  const Evaluation ev = run_eval(a, ckpt);
  std::ofstream file;
  if (!a.out.empty()) file.open(a.out);
  std::ostream& os = a.out.empty() ? std::cout : file;
  for (const auto& p : ev.predictions) os << join(p) << "\n";
  return 0;
}

// ------------------------------------------------------------ score

struct ScoreArgs {
  std::string pred, gold, lexicon;
};

int cmd_score(const ScoreArgs& a) {
  const auto preds = read_lines(a.pred);
  const auto golds = read_lines(a.gold);
  if (preds.size() != golds.size()) {
    throw UsageError("prediction file has " + std::to_string(preds.size()) +
                     " lines but gold file has " + std::to_string(golds.size()));
  }
  EntityLexicon lexicon;
  try {
    lexicon = EntityLexicon::from_json(read_json_file(a.lexicon));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("lexicon: ") + e.what());
  }
  std::vector<Tokens> p;
  std::vector<Tokens> g;
  for (const auto& l : preds) p.push_back(lexicon.tokenize(l));
  for (const auto& l : golds) g.push_back(lexicon.tokenize(l));
  std::cout << score_responses(p, g, lexicon).to_json().dump(2) << "\n";
  return 0;
}

// ------------------------------------------------------------ embed-report

struct EmbedArgs {
  std::string checkpoint, out;
};

int cmd_embed_report(const EmbedArgs& a) {
  if (!fs::exists(fs::path(a.checkpoint) / "model.json")) {
    throw UsageError("checkpoint not found: " + a.checkpoint);
  }
  const Checkpoint ckpt = Checkpoint::load(a.checkpoint);
  const EmbeddingTable table{ckpt.model.embedding, &ckpt.vocab};
  const SimilarityReport rep = same_type_similarity_report(table, ckpt.lexicon);
  export_entity_embeddings(table, ckpt.lexicon, a.out);
  std::cout << rep.to_json().dump(2) << "\n";
  return 0;
}

// ------------------------------------------------------------ grid

struct GridArgs {
  std::string config, data, out;
  std::vector<double> lrs{2.5e-4, 5e-4, 1e-4};
  std::vector<int> hops{1, 3, 5};
  std::vector<double> dld{0.0, 0.05, 0.10, 0.15, 0.20};
  int runs = 10;
  bool best_of = false;
};

int cmd_grid(const GridArgs& a) {
  require_file(a.config, "config");
  require_file(split_file(a.data, "train"), "training split");
  const TrainConfig cfg = TrainConfig::load(a.config);
  const DatasetFormat fmt = parse_format(cfg.format);
  EntityLexicon lexicon;
  if (fs::exists(fs::path(a.data) / "entities.json")) {
    lexicon.merge_entity_file(fs::path(a.data) / "entities.json");
  }
  const fs::path dev_path = split_file(a.data, "dev");
  collect_kb_entities(split_file(a.data, "train"), fmt, lexicon);
  if (fs::exists(dev_path)) collect_kb_entities(dev_path, fmt, lexicon);
  const auto train_set = load_dataset(split_file(a.data, "train"), fmt, lexicon);
  std::vector<DialogSample> dev;
  if (fs::exists(dev_path)) dev = load_dataset(dev_path, fmt, lexicon);
  std::vector<DialogSample> all = train_set;
  all.insert(all.end(), dev.begin(), dev.end());
  const Vocabulary vocab = Vocabulary::build(all, lexicon);

  GridSpec spec{a.lrs, a.hops, a.dld, a.runs, a.best_of};
  const GridResult r = grid_search(cfg, spec, train_set, dev, vocab, lexicon);
  nlohmann::json j = r.to_json();
  j["selection"] = a.best_of ? "best" : "mean";
  fs::create_directories(a.out);
  std::ofstream(fs::path(a.out) / "grid.json") << j.dump(2) << "\n";
  std::ofstream(fs::path(a.out) / "best_config.txt") << r.best_config.to_text();
  std::cout << j.dump(2) << "\n";
  return 0;
}

template <class F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const LexiconError& e) {
    std::cerr << "lexicon error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const ArtifactMismatch& e) {
    std::cerr << "artifact mismatch: " << e.what() << "\n";
    return 4;
  } catch (const VocabularyError& e) {
    std::cerr << "artifact mismatch: " << e.what() << "\n";
    return 4;
  } catch (const ContractViolation& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KB-grounded dialogue generation with record distillation"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  train_cmd->add_option("--config", ta.config, "key = value config file")->required();
  train_cmd->add_option("--data", ta.data, "directory with train.json [dev.json entities.json]")->required();
  train_cmd->add_option("--out", ta.out, "output directory")->required();

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("evaluate", "decode a split and print metrics as JSON");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--data", ea.data, "data directory")->required();
  eval_cmd->add_option("--split", ea.split, "split name (file <split>.json)");

  EvalArgs pa;
  auto* pred_cmd = app.add_subcommand("predict", "decode a split, one response per line");
  pred_cmd->add_option("--checkpoint", pa.checkpoint, "checkpoint directory")->required();
  pred_cmd->add_option("--data", pa.data, "data directory")->required();
  pred_cmd->add_option("--split", pa.split, "split name (file <split>.json)");
  pred_cmd->add_option("--out", pa.out, "output file (default stdout)");

  ScoreArgs sa;
  auto* score_cmd = app.add_subcommand("score", "score line-aligned prediction and gold files");
  score_cmd->add_option("--pred", sa.pred, "predictions, one per line")->required();
  score_cmd->add_option("--gold", sa.gold, "references, one per line")->required();
  score_cmd->add_option("--lexicon", sa.lexicon, "entity lexicon JSON (type -> values)")->required();

  EmbedArgs ma;
  auto* embed_cmd = app.add_subcommand("embed-report", "same-type similarity report and export");
  embed_cmd->add_option("--checkpoint", ma.checkpoint, "checkpoint directory")->required();
  embed_cmd->add_option("--out", ma.out, "TSV file for entity embeddings")->required();

  GridArgs ga;
  auto* grid_cmd = app.add_subcommand("grid", "grid search over learning rate, hops and DLD rate");
  grid_cmd->add_option("--config", ga.config, "base config file")->required();
  grid_cmd->add_option("--data", ga.data, "data directory")->required();
  grid_cmd->add_option("--out", ga.out, "output directory")->required();
  grid_cmd->add_option("--lr", ga.lrs, "learning rates")->delimiter(',');
  grid_cmd->add_option("--hops", ga.hops, "hop counts")->delimiter(',');
  grid_cmd->add_option("--dld", ga.dld, "DLD rates")->delimiter(',');
  grid_cmd->add_option("--runs", ga.runs, "runs per cell");
  grid_cmd->add_flag("--best-of", ga.best_of, "select by best run instead of mean");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  if (*train_cmd) return guarded([&] { return cmd_train(ta); });
  if (*eval_cmd) return guarded([&] { return cmd_evaluate(ea); });
  if (*pred_cmd) return guarded([&] { return cmd_predict(pa); });
  if (*score_cmd) return guarded([&] { return cmd_score(sa); });
  if (*embed_cmd) return guarded([&] { return cmd_embed_report(ma); });
  if (*grid_cmd) return guarded([&] { return cmd_grid(ga); });
  return 2;
}
