#include "kbdistill/trainer.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "kbdistill/embedding.hpp"
#include "kbdistill/errors.hpp"

namespace kbd {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

std::size_t to_size(const std::string& key, const std::string& v) {
  const long long x = to_int(key, v);
  if (x < 0) throw ConfigError("config key '" + key + "' must be non-negative");
  return static_cast<std::size_t>(x);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

bool in_grid(double x, std::initializer_list<double> grid) {
  return std::any_of(grid.begin(), grid.end(), [x](double g) { return std::abs(x - g) < 1e-12; });
}

std::uint64_t fnv1a(const std::vector<std::string>& tokens) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tokens) {
    for (unsigned char c : t) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    h ^= 0xff;
    h *= 1099511628211ULL;
  }
  return h;
}

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

std::vector<Vec> snapshot(const Model& m) {
  std::vector<Vec> out;
  for (std::size_t i = 0; i < m.params.size(); ++i) out.push_back(m.params[i].value);
  return out;
}

void restore(Model& m, const std::vector<Vec>& values) {
  for (std::size_t i = 0; i < m.params.size(); ++i) m.params[i].value = values[i];
}

int thread_count(Exec exec) { return exec == Exec::parallel ? std::max(1, omp_get_max_threads()) : 1; }

}  // namespace

// ---------------------------------------------------------------- config

void TrainConfig::set(const std::string& key, const std::string& v) {
  static const std::map<std::string, std::function<void(TrainConfig&, const std::string&,
                                                         const std::string&)>>
      setters = {
          {"learning_rate", [](auto& c, auto& k, auto& x) { c.learning_rate = to_double(k, x); }},
          {"hops", [](auto& c, auto& k, auto& x) { c.hops = static_cast<int>(to_int(k, x)); }},
          {"dld_rate", [](auto& c, auto& k, auto& x) { c.dld_rate = to_double(k, x); }},
          {"dropout", [](auto& c, auto& k, auto& x) { c.dropout = to_double(k, x); }},
          {"teacher_forcing", [](auto& c, auto& k, auto& x) { c.teacher_forcing = to_double(k, x); }},
          {"emb_dim", [](auto& c, auto& k, auto& x) { c.emb_dim = to_size(k, x); }},
          {"hid_dim", [](auto& c, auto& k, auto& x) { c.hid_dim = to_size(k, x); }},
          {"dec_dim", [](auto& c, auto& k, auto& x) { c.dec_dim = to_size(k, x); }},
          {"att_dim", [](auto& c, auto& k, auto& x) { c.att_dim = to_size(k, x); }},
          {"scorer", [](auto& c, auto&, auto& x) {
             try {
               c.scorer = parse_scorer(x);
             } catch (const ConfigError&) {
               throw ConfigError("config key 'scorer': expected pairwise, naive or entry_level");
             }
           }},
          {"unique_history_words", [](auto& c, auto& k, auto& x) { c.unique_history_words = to_bool(k, x); }},
          {"use_l_ec", [](auto& c, auto& k, auto& x) { c.use_l_ec = to_bool(k, x); }},
          {"use_l_d", [](auto& c, auto& k, auto& x) { c.use_l_d = to_bool(k, x); }},
          {"average_l_ec", [](auto& c, auto& k, auto& x) { c.average_l_ec = to_bool(k, x); }},
          {"weight_g", [](auto& c, auto& k, auto& x) { c.weight_g = to_double(k, x); }},
          {"weight_c", [](auto& c, auto& k, auto& x) { c.weight_c = to_double(k, x); }},
          {"weight_d", [](auto& c, auto& k, auto& x) { c.weight_d = to_double(k, x); }},
          {"weight_ec", [](auto& c, auto& k, auto& x) { c.weight_ec = to_double(k, x); }},
          {"max_ec_pairs", [](auto& c, auto& k, auto& x) { c.max_ec_pairs = to_size(k, x); }},
          {"seed", [](auto& c, auto& k, auto& x) { c.seed = to_size(k, x); }},
          {"epochs", [](auto& c, auto& k, auto& x) { c.epochs = static_cast<int>(to_int(k, x)); }},
          {"patience", [](auto& c, auto& k, auto& x) { c.patience = static_cast<int>(to_int(k, x)); }},
          {"batch_size", [](auto& c, auto& k, auto& x) { c.batch_size = to_size(k, x); }},
          {"clip_norm", [](auto& c, auto& k, auto& x) { c.clip_norm = to_double(k, x); }},
          {"max_decode_len", [](auto& c, auto& k, auto& x) { c.max_decode_len = to_size(k, x); }},
          {"strict_grid", [](auto& c, auto& k, auto& x) { c.strict_grid = to_bool(k, x); }},
          {"parallel", [](auto& c, auto& k, auto& x) { c.parallel = to_bool(k, x); }},
          {"format", [](auto& c, auto&, auto& x) {
             parse_format(x);
             c.format = x;
           }},
          {"pretrained", [](auto& c, auto&, auto& x) { c.pretrained = x; }},
      };
  auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(*this, key, v);
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  auto b = [](bool x) { return x ? "true" : "false"; };
  os << "learning_rate = " << fmt(learning_rate) << "\n"
     << "hops = " << hops << "\n"
     << "dld_rate = " << fmt(dld_rate) << "\n"
     << "dropout = " << fmt(dropout) << "\n"
     << "teacher_forcing = " << fmt(teacher_forcing) << "\n"
     << "emb_dim = " << emb_dim << "\n"
     << "hid_dim = " << hid_dim << "\n"
     << "dec_dim = " << dec_dim << "\n"
     << "att_dim = " << att_dim << "\n"
     << "scorer = " << scorer_name(scorer) << "\n"
     << "unique_history_words = " << b(unique_history_words) << "\n"
     << "use_l_ec = " << b(use_l_ec) << "\n"
     << "use_l_d = " << b(use_l_d) << "\n"
     << "average_l_ec = " << b(average_l_ec) << "\n"
     << "weight_g = " << fmt(weight_g) << "\n"
     << "weight_c = " << fmt(weight_c) << "\n"
     << "weight_d = " << fmt(weight_d) << "\n"
     << "weight_ec = " << fmt(weight_ec) << "\n"
     << "max_ec_pairs = " << max_ec_pairs << "\n"
     << "seed = " << seed << "\n"
     << "epochs = " << epochs << "\n"
     << "patience = " << patience << "\n"
     << "batch_size = " << batch_size << "\n"
     << "clip_norm = " << fmt(clip_norm) << "\n"
     << "max_decode_len = " << max_decode_len << "\n"
     << "strict_grid = " << b(strict_grid) << "\n"
     << "parallel = " << b(parallel) << "\n"
     << "format = " << format << "\n";
  if (!pretrained.empty()) os << "pretrained = " << pretrained << "\n";
  return os.str();
}

std::vector<std::string> TrainConfig::off_grid() const {
  std::vector<std::string> out;
  if (!in_grid(learning_rate, {2.5e-4, 5e-4, 1e-4})) out.push_back("learning_rate");
  if (hops != 1 && hops != 3 && hops != 5) out.push_back("hops");
  if (!in_grid(dld_rate, {0.0, 0.05, 0.10, 0.15, 0.20})) out.push_back("dld_rate");
  if (!in_grid(dropout, {0.2})) out.push_back("dropout");
  if (!in_grid(teacher_forcing, {0.9})) out.push_back("teacher_forcing");
  if (emb_dim != 200) out.push_back("emb_dim");
  if (hid_dim != 200) out.push_back("hid_dim");
  if (dec_dim != 100) out.push_back("dec_dim");
  return out;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate must be positive");
  require(hops >= 1, "hops must be >= 1");
  require(dld_rate >= 0.0 && dld_rate <= 1.0, "dld_rate must lie in [0, 1]");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  require(teacher_forcing >= 0.0 && teacher_forcing <= 1.0, "teacher_forcing must lie in [0, 1]");
  require(emb_dim > 0 && dec_dim > 0 && att_dim > 0, "dimensions must be positive");
  require(hid_dim > 0 && hid_dim % 2 == 0, "hid_dim must be even and positive");
  require(epochs >= 0, "epochs must be >= 0");
  require(patience >= 1, "patience must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(clip_norm > 0.0, "clip_norm must be positive");
  require(max_decode_len >= 1, "max_decode_len must be >= 1");
  require(weight_g >= 0.0 && weight_c >= 0.0 && weight_d >= 0.0 && weight_ec >= 0.0,
          "loss weights must be non-negative");
  if (strict_grid) {
    const auto off = off_grid();
    if (!off.empty()) {
      std::string keys;
      for (const auto& k : off) keys += (keys.empty() ? "" : ", ") + k;
      throw ConfigError("values outside the search grid with strict_grid set: " + keys);
    }
  }
}

ModelConfig TrainConfig::model_config(std::size_t vocab_size) const {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.emb_dim = emb_dim;
  m.hid_dim = hid_dim;
  m.dec_dim = dec_dim;
  m.att_dim = att_dim;
  m.hops = hops;
  m.scorer = scorer;
  m.unique_history_words = unique_history_words;
  m.dropout = dropout;
  return m;
}

// ---------------------------------------------------------------- optimizer

Adam::Adam(const ParamStore& store, double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    m_.emplace_back(store[i].size(), 0.0);
    v_.emplace_back(store[i].size(), 0.0);
  }
}

void Adam::step(ParamStore& store, const GradBuffer& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < store.size(); ++i) {
    Vec& w = store[i].value;
    const Vec& g = grads[i];
    Vec& m = m_[i];
    Vec& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
      v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
      w[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

Real clip_grad_norm(GradBuffer& grads, Real max_norm) {
  const Real n = grads.norm();
  if (n > max_norm) grads.scale(max_norm / n);
  return n;
}

// ---------------------------------------------------------------- checkpoint

void Checkpoint::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  const std::uint64_t vhash = fnv1a(vocab.tokens());
  {
    std::ofstream out(dir / "model.bin", std::ios::binary);
    if (!out) throw ArtifactMismatch("cannot write " + (dir / "model.bin").string());
    auto put = [&out](const auto& x) { out.write(reinterpret_cast<const char*>(&x), sizeof(x)); };
    out.write("KBDCKPT", 8);
    put(kFormatVersion);
    put(vhash);
    put(static_cast<std::uint32_t>(model.params.size()));
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      const Param& p = model.params[i];
      put(static_cast<std::uint32_t>(p.name.size()));
      out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      put(static_cast<std::uint64_t>(p.rows));
      put(static_cast<std::uint64_t>(p.cols));
      out.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.size() * sizeof(Real)));
    }
  }
  nlohmann::json side = {{"format_version", kFormatVersion},
                         {"config", config.to_text()},
                         {"epoch", epoch},
                         {"val_mse_f1", val_mse_f1},
                         {"vocab_size", vocab.size()},
                         {"vocab_hash", vhash},
                         {"param_count", model.params.size()},
                         {"vocab", vocab.tokens()},
                         {"lexicon", lexicon.to_json()}};
  std::ofstream js(dir / "model.json");
  js << side.dump(1) << "\n";
}

Checkpoint Checkpoint::load(const std::filesystem::path& dir) {
  std::ifstream js(dir / "model.json");
  if (!js) throw ArtifactMismatch("missing sidecar " + (dir / "model.json").string());
  nlohmann::json side;
  try {
    js >> side;
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactMismatch(std::string("unreadable sidecar: ") + e.what());
  }
  Checkpoint c;
  try {
    if (side.at("format_version").get<std::uint32_t>() != kFormatVersion) {
      throw ArtifactMismatch("sidecar format version " + side.at("format_version").dump() +
                             " is not supported");
    }
    c.config = TrainConfig::parse(side.at("config").get<std::string>());
    c.vocab = Vocabulary::from_tokens(side.at("vocab").get<std::vector<std::string>>());
    c.lexicon = EntityLexicon::from_json(side.at("lexicon"));
    c.epoch = side.at("epoch").get<int>();
    c.val_mse_f1 = side.at("val_mse_f1").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactMismatch(std::string("malformed sidecar: ") + e.what());
  } catch (const ConfigError& e) {
    throw ArtifactMismatch(std::string("sidecar config: ") + e.what());
  } catch (const VocabularyError& e) {
    throw ArtifactMismatch(std::string("sidecar vocabulary: ") + e.what());
  }
  const std::uint64_t vhash = fnv1a(c.vocab.tokens());
  if (side.value("vocab_hash", std::uint64_t{0}) != vhash) {
    throw ArtifactMismatch("sidecar vocabulary hash does not match its token list");
  }
  c.model = Model::create(c.config.model_config(c.vocab.size()), 0);

  std::ifstream in(dir / "model.bin", std::ios::binary);
  if (!in) throw ArtifactMismatch("missing parameter blob " + (dir / "model.bin").string());
  auto get = [&in](auto& x) {
    in.read(reinterpret_cast<char*>(&x), sizeof(x));
    if (!in) throw ArtifactMismatch("truncated parameter blob");
  };
  char magic[8] = {};
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "KBDCKPT", 8) != 0) throw ArtifactMismatch("not a checkpoint blob");
  std::uint32_t version = 0;
  get(version);
  if (version != kFormatVersion) {
    throw ArtifactMismatch("blob format version " + std::to_string(version) + " is not supported");
  }
  std::uint64_t blob_hash = 0;
  get(blob_hash);
  if (blob_hash != vhash) throw ArtifactMismatch("blob was saved with a different vocabulary");
  std::uint32_t count = 0;
  get(count);
  if (count != c.model.params.size()) {
    throw ArtifactMismatch("blob holds " + std::to_string(count) + " parameters, model expects " +
                           std::to_string(c.model.params.size()));
  }
  for (std::size_t i = 0; i < count; ++i) {
    Param& p = c.model.params[i];
    std::uint32_t len = 0;
    get(len);
    std::string name(len, '\0');
    in.read(name.data(), len);
    std::uint64_t rows = 0;
    std::uint64_t cols = 0;
    get(rows);
    get(cols);
    if (name != p.name || rows != p.rows || cols != p.cols) {
      throw ArtifactMismatch("parameter '" + name + "' " + std::to_string(rows) + "x" +
                             std::to_string(cols) + " does not match '" + p.name + "' " +
                             std::to_string(p.rows) + "x" + std::to_string(p.cols));
    }
    in.read(reinterpret_cast<char*>(p.value.data()),
            static_cast<std::streamsize>(p.value.size() * sizeof(Real)));
    if (!in) throw ArtifactMismatch("truncated parameter blob");
  }
  return c;
}

// ---------------------------------------------------------------- evaluation

Evaluation evaluate(const Model& model, const std::vector<DialogSample>& samples,
                    const Vocabulary& vocab, const EntityLexicon& lexicon,
                    std::size_t max_decode_len, Exec exec) {
  Evaluation ev;
  const std::size_t n = samples.size();
  ev.predictions.resize(n);
  ev.sketches.resize(n);
  std::vector<PreparedSample> prepared;
  prepared.reserve(n);
  for (const auto& s : samples) prepared.push_back(prepare_sample(s, vocab));
  std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic, 1) if (exec == Exec::parallel)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      DecodeResult r = decode_greedy(model, prepared[i], vocab, lexicon, max_decode_len);
      ev.predictions[i] = std::move(r.resolved);
      ev.sketches[i] = std::move(r.sketch);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<Tokens> golds;
  std::vector<std::string> domains;
  for (const auto& s : samples) {
    golds.push_back(s.gold_response);
    domains.push_back(s.domain);
  }
  ev.report = score_responses(ev.predictions, golds, lexicon, domains);
  return ev;
}

LossBreakdown evaluate_loss(const Model& model, const TrainConfig& config,
                            const std::vector<DialogSample>& samples, const Vocabulary& vocab,
                            const EntityLexicon& lexicon) {
  LossBreakdown lb;
  if (samples.empty()) return lb;
  for (const auto& s : samples) {
    const PreparedSample p = prepare_sample(s, vocab);
    Tape tape;
    const SampleLosses sl = forward_losses(tape, model, p);
    lb.l_g += config.weight_g * tape.scalar(sl.l_g);
    lb.l_c += config.weight_c * tape.scalar(sl.l_c);
    if (config.use_l_d) lb.l_d += config.weight_d * tape.scalar(sl.l_d);
  }
  const double n = static_cast<double>(samples.size());
  lb.l_g /= n;
  lb.l_c /= n;
  lb.l_d /= n;
  if (config.use_l_ec) {
    std::vector<const DialogSample*> ptrs;
    for (const auto& s : samples) ptrs.push_back(&s);
    std::mt19937_64 rng(config.seed);
    const auto pairs = batch_entity_pairs(ptrs, lexicon, vocab, config.max_ec_pairs, rng);
    double scale = config.weight_ec;
    if (config.average_l_ec && !pairs.empty()) scale /= static_cast<double>(pairs.size());
    lb.l_ec = scale * loss_entity_constraint(*model.embedding, pairs);
  }
  lb.finalize();
  return lb;
}

nlohmann::json EpochLog::to_json() const {
  return {{"epoch", epoch},         {"l_g", loss.l_g},
          {"l_c", loss.l_c},        {"l_ec", loss.l_ec},
          {"l_d", loss.l_d},        {"total", loss.total},
          {"val_mse_f1", 100.0 * val_mse_f1}, {"val_bleu", 100.0 * val_bleu},
          {"improved", improved}};
}

// ---------------------------------------------------------------- training

TrainResult train(const TrainConfig& config, const std::vector<DialogSample>& train_set,
                  const std::vector<DialogSample>& val, const Vocabulary& vocab,
                  const EntityLexicon& lexicon,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (train_set.empty()) throw ContractViolation("training set is empty");

  TrainResult result;
  Model model = Model::create(config.model_config(vocab.size()), config.seed);
  if (!config.pretrained.empty()) {
    init_embeddings(*model.embedding, vocab, std::filesystem::path(config.pretrained), config.seed);
  }
  std::vector<PreparedSample> prepared;
  prepared.reserve(train_set.size());
  for (const auto& s : train_set) prepared.push_back(prepare_sample(s, vocab));
  const std::vector<DialogSample>& selection = val.empty() ? train_set : val;

  const Exec exec = config.exec();
  const int threads = thread_count(exec);
  Adam adam(model.params, config.learning_rate);
  GradBuffer total(model.params);
  std::vector<GradBuffer> buffers;
  for (int t = 0; t < threads; ++t) buffers.emplace_back(model.params);

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  double best = -1.0;
  std::vector<Vec> best_values = snapshot(model);
  int best_epoch = 0;
  int stale = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    LossBreakdown epoch_loss;
    std::size_t batches = 0;

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t bsize = std::min(config.batch_size, order.size() - start);
      const double inv_b = 1.0 / static_cast<double>(bsize);
      total.zero();
      std::vector<std::array<Real, 3>> parts(bsize);
      std::vector<std::exception_ptr> errors(bsize);

      for (std::size_t g = 0; g < bsize; g += static_cast<std::size_t>(threads)) {
        const std::size_t n = std::min<std::size_t>(threads, bsize - g);
#pragma omp parallel for schedule(static, 1) num_threads(threads) if (threads > 1)
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t slot = g + j;
          const std::size_t idx = order[start + slot];
          try {
            GradBuffer& buf = buffers[j];
            buf.zero();
            std::mt19937_64 rng = sample_rng(config.seed, static_cast<std::uint64_t>(epoch), idx);
            const PreparedSample& ps = prepared[idx];
            std::vector<TokenId> target;
            ForwardOptions fo;
            if (config.dld_rate > 0.0) {
              target = apply_dld(ps.sketch, ps.response, config.dld_rate, rng);
              fo.sketch_override = &target;
            }
            fo.teacher_forcing = config.teacher_forcing;
            fo.rng = &rng;
            fo.dropout = DropoutContext{config.dropout, &rng};
            Tape tape(&buf, Exec::serial);
            const SampleLosses sl = forward_losses(tape, model, ps, fo);
            if (auto bad = tape.first_non_finite()) {
              throw NumericError("non-finite value from op " + *bad + " (epoch " +
                                 std::to_string(epoch) + ", sample " + std::to_string(idx) + ")");
            }
            Var root = tape.scale(sl.l_g, tape.scalar_constant(config.weight_g));
            root = tape.add(root, tape.scale(sl.l_c, tape.scalar_constant(config.weight_c)));
            parts[slot] = {config.weight_g * tape.scalar(sl.l_g),
                           config.weight_c * tape.scalar(sl.l_c), 0.0};
            if (config.use_l_d) {
              root = tape.add(root, tape.scale(sl.l_d, tape.scalar_constant(config.weight_d)));
              parts[slot][2] = config.weight_d * tape.scalar(sl.l_d);
            }
            tape.backward(root, inv_b);
          } catch (...) {
            errors[slot] = std::current_exception();
          }
        }
        for (std::size_t j = 0; j < n; ++j) {
          if (errors[g + j]) std::rethrow_exception(errors[g + j]);
          total.add(buffers[j]);
        }
      }

      LossBreakdown lb;
      for (const auto& p : parts) {
        lb.l_g += p[0];
        lb.l_c += p[1];
        lb.l_d += p[2];
      }
      lb.l_g *= inv_b;
      lb.l_c *= inv_b;
      lb.l_d *= inv_b;

      if (config.use_l_ec) {
        std::vector<const DialogSample*> batch;
        for (std::size_t k = 0; k < bsize; ++k) batch.push_back(&train_set[order[start + k]]);
        std::mt19937_64 pair_rng = sample_rng(config.seed, static_cast<std::uint64_t>(epoch),
                                              0xec000000ULL + start);
        const auto pairs = batch_entity_pairs(batch, lexicon, vocab, config.max_ec_pairs, pair_rng);
        double scale = config.weight_ec;
        if (config.average_l_ec && !pairs.empty()) scale /= static_cast<double>(pairs.size());
        lb.l_ec = scale * loss_entity_constraint(*model.embedding, pairs, exec);
        loss_entity_constraint_backward(*model.embedding, pairs, scale,
                                        total[model.embedding->id], exec);
      }
      lb.finalize();
      if (!std::isfinite(lb.total)) {
        throw NumericError("non-finite batch loss at epoch " + std::to_string(epoch) +
                           (std::isfinite(lb.l_ec) ? "" : " (entity constraint)"));
      }
      const Real norm = clip_grad_norm(total, config.clip_norm);
      if (!std::isfinite(norm)) {
        throw NumericError("non-finite gradient norm at epoch " + std::to_string(epoch));
      }
      adam.step(model.params, total);

      result.batch_losses.push_back(lb.total);
      epoch_loss.l_g += lb.l_g;
      epoch_loss.l_c += lb.l_c;
      epoch_loss.l_d += lb.l_d;
      epoch_loss.l_ec += lb.l_ec;
      ++batches;
    }

    const double nb = static_cast<double>(std::max<std::size_t>(batches, 1));
    epoch_loss.l_g /= nb;
    epoch_loss.l_c /= nb;
    epoch_loss.l_d /= nb;
    epoch_loss.l_ec /= nb;
    epoch_loss.finalize();

    const Evaluation ev = evaluate(model, selection, vocab, lexicon, config.max_decode_len, exec);
    EpochLog log;
    log.epoch = epoch;
    log.loss = epoch_loss;
    log.val_mse_f1 = ev.report.mse_f1;
    log.val_bleu = ev.report.bleu;
    log.improved = ev.report.mse_f1 > best;
    if (log.improved) {
      best = ev.report.mse_f1;
      best_values = snapshot(model);
      best_epoch = epoch;
      stale = 0;
    } else {
      ++stale;
    }
    result.history.push_back(log);
    if (on_epoch) on_epoch(log);
    if (stale >= config.patience) break;
  }

  restore(model, best_values);
  result.best.config = config;
  result.best.model = std::move(model);
  result.best.vocab = vocab;
  result.best.lexicon = lexicon;
  result.best.epoch = best_epoch;
  result.best.val_mse_f1 = std::max(best, 0.0);
  return result;
}

// ---------------------------------------------------------------- grid search

nlohmann::json GridResult::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    std::vector<double> runs;
    for (double x : r.run_mse_f1) runs.push_back(100.0 * x);
    rows_json.push_back({{"learning_rate", r.learning_rate},
                         {"hops", r.hops},
                         {"dld_rate", r.dld_rate},
                         {"runs", runs},
                         {"mean_mse_f1", 100.0 * r.mean},
                         {"best_mse_f1", 100.0 * r.best}});
  }
  return {{"rows", rows_json},
          {"best_row", best_row},
          {"best",
           {{"learning_rate", best_config.learning_rate},
            {"hops", best_config.hops},
            {"dld_rate", best_config.dld_rate}}}};
}

GridResult grid_search(const TrainConfig& base, const GridSpec& grid,
                       const std::vector<DialogSample>& train_set,
                       const std::vector<DialogSample>& val, const Vocabulary& vocab,
                       const EntityLexicon& lexicon) {
  if (grid.learning_rates.empty() || grid.hops.empty() || grid.dld_rates.empty()) {
    throw ConfigError("every grid axis needs at least one value");
  }
  if (grid.runs_per_cell < 1) throw ConfigError("runs_per_cell must be >= 1");
  GridResult out;
  for (double lr : grid.learning_rates) {
    for (int hops : grid.hops) {
      for (double dld : grid.dld_rates) {
        GridRow row;
        row.learning_rate = lr;
        row.hops = hops;
        row.dld_rate = dld;
        for (int r = 0; r < grid.runs_per_cell; ++r) {
          TrainConfig c = base;
          c.learning_rate = lr;
          c.hops = hops;
          c.dld_rate = dld;
          c.seed = base.seed + static_cast<std::uint64_t>(r);
          row.run_mse_f1.push_back(train(c, train_set, val, vocab, lexicon).best.val_mse_f1);
        }
        double sum = 0.0;
        for (double x : row.run_mse_f1) sum += x;
        row.mean = sum / static_cast<double>(row.run_mse_f1.size());
        row.best = *std::max_element(row.run_mse_f1.begin(), row.run_mse_f1.end());
        out.rows.push_back(std::move(row));
      }
    }
  }
  auto key = [&grid](const GridRow& r) { return grid.select_best_of ? r.best : r.mean; };
  for (std::size_t i = 1; i < out.rows.size(); ++i) {
    if (key(out.rows[i]) > key(out.rows[out.best_row])) out.best_row = i;
  }
  out.best_config = base;
  out.best_config.learning_rate = out.rows[out.best_row].learning_rate;
  out.best_config.hops = out.rows[out.best_row].hops;
  out.best_config.dld_rate = out.rows[out.best_row].dld_rate;
  return out;
}

}  // namespace kbd
