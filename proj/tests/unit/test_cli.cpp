#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "synthetic.hpp"

using namespace kbd;
using namespace kbd::testing;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt";
  const std::string cmd =
      std::string(KBD_CLI_PATH) + " " + args + " > " + out.string() + " 2> " + (dir / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("kbd_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

fs::path toy_run(const fs::path& dir) {
  fs::create_directories(dir / "data");
  write(dir / "data" / "train.json", calendar_dialogs({6, 3}).dump());
  write(dir / "data" / "dev.json", calendar_dialogs({2, 4}).dump());
  write(dir / "data" / "test.json", calendar_dialogs({3, 5}).dump());
  write(dir / "data" / "empty.json", "[]");
  TrainConfig c = small_config();
  c.epochs = 2;
  write(dir / "toy.cfg", c.to_text());
  return dir;
}

}  // namespace

TEST_CASE("cli usage errors exit 2") {
  const fs::path d = scratch("usage");
  CHECK(cli("", d).code == 2);
  CHECK(cli("train --config x.cfg --out o", d).code == 2);
  CHECK(cli("frobnicate", d).code == 2);
  CHECK(cli("train --config " + (d / "missing.cfg").string() + " --data " + d.string() + " --out o", d).code == 2);
  write(d / "bad.cfg", "mystery = 3\n");
  write(d / "train.json", "[]");
  CHECK(cli("train --config " + (d / "bad.cfg").string() + " --data " + d.string() + " --out " + (d / "o").string(), d)
            .code == 2);
  fs::remove_all(d);
}

TEST_CASE("cli score reproduces the ledger of the stuttering example") {
  const fs::path d = scratch("score");
  write(d / "lex.json", R"({"date": ["8th"], "time": ["11am"], "weekday": ["wednesday"]})");
  write(d / "gold.txt", "the 8th at 11am on wednesday , yes 11am\nthe 8th at 11am on wednesday , yes 11am\n");
  write(d / "pred.txt", "the 8th at 11am\n8th 8th 8th 8th\n");
  const Run r = cli("score --pred " + (d / "pred.txt").string() + " --gold " + (d / "gold.txt").string() +
                        " --lexicon " + (d / "lex.json").string(),
                    d);
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j["ledgers"]["mse_f1"]["tp"] == 3);
  CHECK(j["ledgers"]["mse_f1"]["pred_total"] == 6);
  CHECK(j["ledgers"]["mse_f1"]["gold_total"] == 8);
  CHECK(j["mse_f1"].get<double>() == doctest::Approx(100.0 * 2 * 0.5 * 0.375 / 0.875));

  const Run same = cli("score --pred " + (d / "gold.txt").string() + " --gold " + (d / "gold.txt").string() +
                           " --lexicon " + (d / "lex.json").string(),
                       d);
  REQUIRE(same.code == 0);
  const auto js = nlohmann::json::parse(same.out);
  CHECK(js["mse_f1"].get<double>() == doctest::Approx(100.0));
  CHECK(js["bleu"].get<double>() == doctest::Approx(100.0));

  write(d / "blank.txt", "\n\n");
  const Run blank = cli("score --pred " + (d / "blank.txt").string() + " --gold " + (d / "gold.txt").string() +
                            " --lexicon " + (d / "lex.json").string(),
                        d);
  REQUIRE(blank.code == 0);
  CHECK(nlohmann::json::parse(blank.out)["mse_f1"].get<double>() == 0.0);

  write(d / "short.txt", "the 8th\n");
  CHECK(cli("score --pred " + (d / "short.txt").string() + " --gold " + (d / "gold.txt").string() + " --lexicon " +
                (d / "lex.json").string(),
            d)
            .code == 2);
  fs::remove_all(d);
}

TEST_CASE("cli train, evaluate, predict and embed-report") {
  const fs::path d = toy_run(scratch("train"));
  const std::string data = (d / "data").string();
  const std::string ckpt = (d / "run" / "checkpoint").string();
  const Run t = cli("train --config " + (d / "toy.cfg").string() + " --data " + data + " --out " + (d / "run").string(), d);
  REQUIRE(t.code == 0);
  CHECK(fs::exists(d / "run" / "checkpoint" / "model.bin"));
  CHECK(fs::exists(d / "run" / "checkpoint" / "model.json"));
  CHECK(fs::exists(d / "run" / "config.txt"));
  std::ifstream log(d / "run" / "train_log.jsonl");
  int lines = 0;
  for (std::string l; std::getline(log, l);) ++lines;
  CHECK(lines >= 2);

  const Run e1 = cli("evaluate --checkpoint " + ckpt + " --data " + data, d);
  const Run e2 = cli("evaluate --checkpoint " + ckpt + " --data " + data, d);
  REQUIRE(e1.code == 0);
  CHECK(e1.out == e2.out);
  const auto j = nlohmann::json::parse(e1.out);
  CHECK(j["samples"] == 3);
  for (const char* k : {"bleu", "entity_f1", "mse_f1"}) {
    CHECK(j[k].get<double>() >= 0.0);
    CHECK(j[k].get<double>() <= 100.0);
  }

  const Run empty = cli("evaluate --checkpoint " + ckpt + " --data " + data + " --split empty", d);
  REQUIRE(empty.code == 0);
  const auto je = nlohmann::json::parse(empty.out);
  CHECK(je["samples"] == 0);
  CHECK(je["ledgers"]["mse_f1"]["tp"] == 0);
  CHECK(je["ledgers"]["mse_f1"]["gold_total"] == 0);

  const Run p = cli("predict --checkpoint " + ckpt + " --data " + data + " --out " + (d / "pred.txt").string(), d);
  REQUIRE(p.code == 0);
  std::ifstream pred(d / "pred.txt");
  int n = 0;
  for (std::string l; std::getline(pred, l);) ++n;
  CHECK(n == 3);

  const Run m = cli("embed-report --checkpoint " + ckpt + " --out " + (d / "emb.tsv").string(), d);
  REQUIRE(m.code == 0);
  CHECK(nlohmann::json::parse(m.out).contains("mean_pairwise_cosine"));
  CHECK(fs::file_size(d / "emb.tsv") > 0);

  CHECK(cli("evaluate --checkpoint " + (d / "nothing").string() + " --data " + data, d).code == 2);

  fs::resize_file(fs::path(ckpt) / "model.bin", fs::file_size(fs::path(ckpt) / "model.bin") / 2);
  CHECK(cli("evaluate --checkpoint " + ckpt + " --data " + data, d).code == 4);
  fs::remove_all(d);
}

TEST_CASE("cli reports numeric failure with exit 3") {
  const fs::path d = toy_run(scratch("nan"));
  TrainConfig c = small_config();
  c.learning_rate = 1e300;
  c.epochs = 5;
  c.batch_size = 1;
  write(d / "nan.cfg", c.to_text());
  const Run r = cli("train --config " + (d / "nan.cfg").string() + " --data " + (d / "data").string() + " --out " +
                        (d / "run").string(),
                    d);
  CHECK(r.code == 3);
  fs::remove_all(d);
}

TEST_CASE("cli grid writes a table and the selected config") {
  const fs::path d = toy_run(scratch("grid"));
  TrainConfig c = small_config();
  c.epochs = 1;
  write(d / "base.cfg", c.to_text());
  const Run r = cli("grid --config " + (d / "base.cfg").string() + " --data " + (d / "data").string() + " --out " +
                        (d / "g").string() + " --lr 0.001,0.005 --hops 1 --dld 0 --runs 1",
                    d);
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j["rows"].size() == 2);
  CHECK(j["selection"] == "mean");
  CHECK(fs::exists(d / "g" / "best_config.txt"));
  fs::remove_all(d);
}
