// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: train / generate / evaluate / sweep-k / tokenize /
// validate. Config files are flat `key = value` text with `#` comments;
// command-line flags override file values.

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mdvae/checkpoint.hpp"
#include "mdvae/data.hpp"
#include "mdvae/eval.hpp"
#include "mdvae/generate.hpp"
#include "mdvae/train.hpp"

namespace fs = std::filesystem;
using namespace mdvae;

namespace {

struct ModelFlags {
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 2;
  int d_z = 16;
  int k = 3;
  int max_len = 60;
  int ff_mult = 2;

  void attach(CLI::App* cmd) {
    cmd->add_option("--d-model", d_model, "embedding width");
    cmd->add_option("--n-layers", n_layers, "transformer layers per stack");
    cmd->add_option("--n-heads", n_heads, "attention heads");
    cmd->add_option("--d-z", d_z, "latent dimension");
    cmd->add_option("--k", k, "number of decoders");
    cmd->add_option("--max-len", max_len, "maximum token length");
    cmd->add_option("--ff-mult", ff_mult, "feed-forward width multiplier");
  }

  model::ModelConfig to_config() const {
    model::ModelConfig cfg;
    cfg.d_model = d_model;
    cfg.n_layers = n_layers;
    cfg.n_heads = n_heads;
    cfg.d_z = d_z;
    cfg.K = k;
    cfg.max_len = max_len;
    cfg.ff_mult = ff_mult;
    return cfg;
  }
};

struct TrainFlags {
  std::string variant = "md_dif_col";
  int epochs = 100;
  int batch_size = 128;
  double lr = 0.001;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;
  double alpha = 0.5;
  double kld_target = 15.0;
  long anneal_steps = 1000;

  void attach(CLI::App* cmd) {
    cmd->add_option("--variant", variant,
                    "base|controlvae|sd_dif_col|md|md_col|md_dif|md_dif_col");
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--batch-size", batch_size, "batch size");
    cmd->add_option("--lr", lr, "Adam learning rate");
    cmd->add_option("--seed", seed, "master random seed");
    cmd->add_option("--checkpoint-every", checkpoint_every,
                    "checkpoint interval in steps (0 = final only)");
    cmd->add_option("--alpha", alpha, "collaborative interpolation weight");
    cmd->add_option("--kld-target", kld_target, "regularizer setpoint");
    cmd->add_option("--anneal-steps", anneal_steps,
                    "k-annealing ramp length (base variant)");
  }

  train::TrainConfig to_config() const {
    train::TrainConfig tc;
    tc.variant = train::variant_from_string(variant);
    tc.epochs = epochs;
    tc.batch_size = batch_size;
    tc.lr = lr;
    tc.seed = seed;
    tc.checkpoint_every = checkpoint_every;
    tc.loss.alpha = alpha;
    tc.loss.kld_target = kld_target;
    tc.loss.anneal_steps = anneal_steps;
    return tc;
  }
};

void dump_effective_config(CLI::App* cmd, const std::string& path) {
  std::ofstream os(path);
  os << cmd->config_to_str(true, true);
}

// Flat `key = value` config files with `#` comments. File entries are
// injected as flags right after the subcommand, skipping any key the user
// already passed explicitly — so command-line flags override the file.
std::vector<std::string> expand_config_args(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size())
        throw std::runtime_error("--config requires a path");
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (path.empty()) return rest;
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file: " + path);

  auto trim = [](std::string s) {
    s.erase(0, s.find_first_not_of(" \t\r"));
    s.erase(s.find_last_not_of(" \t\r") + 1);
    return s;
  };
  std::vector<std::string> injected;
  for (std::string line; std::getline(is, line);) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("bad config line (want key = value): " + line);
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    std::string flag = "--" + key;
    bool overridden = false;
    for (const auto& a : rest)
      if (a == flag || a.rfind(flag + "=", 0) == 0) overridden = true;
    if (overridden) continue;
    injected.push_back(flag);
    if (!value.empty()) injected.push_back(value);
  }
  if (rest.empty()) return injected;
  std::vector<std::string> out{rest.front()};  // subcommand name first
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), rest.begin() + 1, rest.end());
  return out;
}

data::Corpus load_corpus_checked(const std::string& path, int max_len) {
  if (!fs::exists(path))
    throw data::DataError("corpus not found: " + path);
  return data::load_corpus(path, max_len);
}

const char* property_name(int p) {
  return p == 0 ? "molwt" : (p == 1 ? "logp" : "qed");
}

int property_index(const std::string& name) {
  if (name == "molwt") return 0;
  if (name == "logp") return 1;
  if (name == "qed") return 2;
  throw std::invalid_argument("unknown property: " + name);
}

// ---- train ----

int run_train(const std::string& corpus_path, const ModelFlags& mf,
              const TrainFlags& tf, const std::string& out, CLI::App* cmd) {
  fs::create_directories(out);
  auto corpus = load_corpus_checked(corpus_path, mf.max_len);
  auto stats = data::compute_stats(corpus);

  train::TrainConfig tc = tf.to_config();
  tc.log_path = out + "/log.csv";
  tc.checkpoint_dir = out;
  dump_effective_config(cmd, out + "/config.txt");

  std::vector<train::EpochLog> logs;
  auto st = train::fit(tc, mf.to_config(), corpus, stats, &logs);
  const auto& last = logs.back();
  std::cout << "trained " << train::to_string(tc.variant) << " for "
            << tf.epochs << " epochs (" << st.step << " steps)\n"
            << "final l_recon=" << last.l_recon << " l_reg=" << last.l_reg
            << " beta=" << last.beta << "\n"
            << "checkpoint: " << out << "/final.bin\n";
  return 0;
}

// ---- generate ----

struct CsvRow {
  std::string smiles;
  std::string anchored_property;
  double anchor = 0;
  bool valid = false, unique = false, novel = false;
  std::optional<double> molwt;
};

void write_generation_csv(const std::string& path,
                          const std::vector<CsvRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "smiles,anchored_property,anchor,valid,unique,novel,molwt\n";
  for (const auto& r : rows) {
    os << r.smiles << ',' << r.anchored_property << ',' << r.anchor << ','
       << (r.valid ? 1 : 0) << ',' << (r.unique ? 1 : 0) << ','
       << (r.novel ? 1 : 0) << ',';
    if (r.molwt) os << *r.molwt;
    os << '\n';
  }
}

std::vector<CsvRow> read_generation_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(is, line) ||
      line != "smiles,anchored_property,anchor,valid,unique,novel,molwt")
    throw std::runtime_error("bad generation CSV header in " + path);
  std::vector<CsvRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    CsvRow r;
    std::getline(ss, r.smiles, ',');
    std::getline(ss, r.anchored_property, ',');
    std::getline(ss, field, ',');
    r.anchor = std::stod(field);
    std::getline(ss, field, ',');
    r.valid = field == "1";
    std::getline(ss, field, ',');
    r.unique = field == "1";
    std::getline(ss, field, ',');
    r.novel = field == "1";
    if (std::getline(ss, field, ',') && !field.empty())
      r.molwt = std::stod(field);
    rows.push_back(std::move(r));
  }
  return rows;
}

int run_generate(const std::string& ckpt_path, const std::string& corpus_path,
                 const std::string& regime_name, const std::string& property,
                 int n, std::uint64_t seed, const std::string& out,
                 const std::string& latent, const std::string& rule,
                 const std::string& space, double temperature) {
  if (!fs::exists(ckpt_path))
    throw std::runtime_error("checkpoint not found: " + ckpt_path);
  auto ck = checkpoint::load(ckpt_path);
  auto corpus = load_corpus_checked(corpus_path, ck.config.max_len);
  auto stats = data::compute_stats(corpus);

  generate::SamplerConfig sampler;
  sampler.max_len = ck.config.max_len;
  sampler.temperature = temperature;
  sampler.rule = rule == "greedy" ? generate::DecodeRule::kGreedy
                                  : generate::DecodeRule::kMultinomial;
  sampler.space = space == "post_softmax"
                      ? generate::EnsembleSpace::kPostSoftmax
                      : generate::EnsembleSpace::kPreSoftmax;
  const bool shared_z = latent == "shared";

  const int prop = property_index(property);
  auto grid = data::condition_grid(stats, data::parse_regime(regime_name));
  RngStream cond_rng(seed, "data");
  RngStream decode_rng(seed, "decode");

  std::vector<CsvRow> rows;
  for (const auto& anchor : grid) {
    if (anchor.property != prop) continue;
    std::vector<eval::GenerationRecord> recs;
    for (int i = 0; i < n; ++i) {
      auto cond = data::sample_given_anchor(stats, anchor, cond_rng);
      auto y = data::normalize(cond, stats);
      eval::GenerationRecord rec;
      auto sample = generate::sample_from_prior(ck.config, ck.params, y.vec(),
                                                sampler, shared_z, decode_rng);
      rec.smiles = sample.smiles;
      rec.terminated = sample.terminated;
      rec.condition = cond;
      recs.push_back(std::move(rec));
    }
    eval::annotate(recs, corpus);  // uniqueness within this anchor's batch
    for (const auto& rec : recs) {
      CsvRow row;
      row.smiles = rec.smiles;
      row.anchored_property = property_name(prop);
      row.anchor = anchor.value;
      row.valid = rec.valid;
      row.unique = rec.unique;
      row.novel = rec.novel;
      row.molwt = rec.mol_wt;
      rows.push_back(std::move(row));
    }
  }
  write_generation_csv(out, rows);
  std::cout << "wrote " << rows.size() << " generations to " << out << "\n";
  return 0;
}

// ---- evaluate ----

int run_evaluate(const std::string& ckpt_path, const std::string& seen_path,
                 const std::string& unseen_path,
                 const std::string& generated_path, const std::string& out) {
  eval::MetricsReport report;
  std::optional<checkpoint::Checkpoint> ck;
  if (!ckpt_path.empty()) {
    if (!fs::exists(ckpt_path))
      throw std::runtime_error("checkpoint not found: " + ckpt_path);
    ck = checkpoint::load(ckpt_path);
  }

  std::optional<data::Corpus> seen;
  std::optional<data::ConditionStats> stats;
  if (!seen_path.empty()) {
    int max_len = ck ? ck->config.max_len : 120;
    seen = load_corpus_checked(seen_path, max_len);
    stats = data::compute_stats(*seen);
  }

  if (ck && seen) {
    auto rate = eval::reconstruction_success_rate(*seen, *stats, ck->config,
                                                  ck->params);
    report.recon_rate_seen = rate.molecule_rate;
    report.recon_token_acc_seen = rate.token_accuracy;
    if (ck->config.K >= 2) {
      std::vector<data::Record> probe(
          seen->records.begin(),
          seen->records.begin() +
              std::min<std::size_t>(seen->records.size(), 64));
      report.inter_decoder_kld = eval::inter_decoder_kld(
          batching::make_batch(probe, *stats), ck->config, ck->params);
    }
  }
  if (ck && !unseen_path.empty()) {
    if (!stats) throw std::runtime_error("--unseen requires --seen for stats");
    auto unseen = load_corpus_checked(unseen_path, ck->config.max_len);
    auto rate = eval::reconstruction_success_rate(unseen, *stats, ck->config,
                                                  ck->params);
    report.recon_rate_unseen = rate.molecule_rate;
    report.recon_token_acc_unseen = rate.token_accuracy;
  }

  if (!generated_path.empty()) {
    auto rows = read_generation_csv(generated_path);
    std::vector<eval::GenerationRecord> recs;
    for (const auto& r : rows) {
      eval::GenerationRecord rec;
      rec.smiles = r.smiles;
      rec.valid = r.valid;
      rec.unique = r.unique;
      rec.novel = r.novel;
      rec.mol_wt = r.molwt;
      recs.push_back(std::move(rec));
    }
    if (seen) eval::annotate(recs, *seen);  // recompute flags when possible
    report.gen_efficiency = eval::generative_efficiency(recs);

    // per-anchor top-1 MAE for the built-in molWt property
    std::map<double, std::vector<eval::GenerationRecord>> by_anchor;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].anchored_property == "molwt")
        by_anchor[rows[i].anchor].push_back(recs[i]);
    bool any_valid = false;
    for (const auto& [anchor, group] : by_anchor) {
      auto mae = eval::top1_condition_mae(group, anchor);
      std::ostringstream key;
      key << "top1_mae_molwt_" << anchor;
      if (mae) {
        report.extra[key.str()] = *mae;
        if (!report.top1_mae || *mae < *report.top1_mae)
          report.top1_mae = *mae;
        any_valid = true;
      }
    }
    if (!by_anchor.empty() && !any_valid) report.no_valid_molecule = true;
  }

  std::ofstream txt(out + ".txt");
  report.write_text(txt);
  std::ofstream json(out + ".json");
  json << report.to_json().dump(2) << '\n';
  report.write_text(std::cout);
  return 0;
}

// ---- sweep-k ----

int run_sweep(const std::string& corpus_path, const ModelFlags& mf,
              const TrainFlags& tf, const std::vector<int>& k_list,
              const std::string& out) {
  fs::create_directories(out);
  auto corpus = load_corpus_checked(corpus_path, mf.max_len);
  auto stats = data::compute_stats(corpus);

  std::ofstream csv(out + "/sweep.csv");
  csv << "k,params,l_recon,recon_rate,token_acc\n";
  std::cout << "k,params,l_recon,recon_rate,token_acc\n";
  for (int k : k_list) {
    ModelFlags mk = mf;
    mk.k = k;
    TrainFlags tk = tf;
    // K=1 degenerates to the single-decoder controller baseline
    if (k == 1) tk.variant = "controlvae";
    auto st = train::fit(tk.to_config(), mk.to_config(), corpus, stats);
    double recon = 0;
    int tail = std::min<int>(10, static_cast<int>(st.history.size()));
    for (int i = 0; i < tail; ++i)
      recon += st.history[st.history.size() - 1 - i].l_recon;
    recon /= tail;
    auto rate = eval::reconstruction_success_rate(corpus, stats, st.cfg,
                                                  st.params);
    std::ostringstream row;
    row << k << ',' << st.params.count() << ',' << recon << ','
        << rate.molecule_rate << ',' << rate.token_accuracy;
    csv << row.str() << '\n';
    std::cout << row.str() << '\n';
  }
  return 0;
}

// ---- tokenize / validate ----

int run_tokenize(const std::string& s) {
  auto toks = smiles::tokenize(s);
  if (!toks) {
    std::cerr << "cannot tokenize: " << s << "\n";
    return 1;
  }
  const auto& vocab = smiles::Vocabulary::instance();
  for (std::size_t i = 0; i < toks->ids.size(); ++i) {
    if (i) std::cout << ' ';
    std::cout << vocab.text(toks->ids[i]);
  }
  std::cout << '\n';
  for (std::size_t i = 0; i < toks->ids.size(); ++i) {
    if (i) std::cout << ' ';
    std::cout << toks->ids[i];
  }
  std::cout << '\n';
  return 0;
}

int run_validate(const std::string& s, bool strict) {
  auto report = smiles::check_validity(s, strict);
  if (report.valid) {
    std::cout << "valid";
    if (auto mw = smiles::molecular_weight(s)) std::cout << " molwt=" << *mw;
    std::cout << '\n';
    return 0;
  }
  std::cout << "invalid:";
  for (auto f : report.reasons) std::cout << ' ' << smiles::failure_name(f);
  std::cout << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-decoder conditional VAE for SMILES generation"};
  app.require_subcommand(1);
  std::string config_sink;  // consumed by expand_config_args before parsing

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model variant");
  train_cmd->add_option("--config", config_sink,
                      "flat key=value config file (flags override)");
  std::string train_corpus, train_out = "run";
  train_cmd->add_option("--corpus", train_corpus, "training CSV")->required();
  train_cmd->add_option("--out", train_out, "output directory");
  ModelFlags train_mf;
  train_mf.attach(train_cmd);
  TrainFlags train_tf;
  train_tf.attach(train_cmd);

  // generate
  auto* gen_cmd = app.add_subcommand("generate", "sample molecules from a checkpoint");
  gen_cmd->add_option("--config", config_sink,
                      "flat key=value config file (flags override)");
  std::string gen_ckpt, gen_corpus, gen_out = "gen.csv";
  std::string gen_regime = "in_domain", gen_property = "molwt";
  std::string gen_latent = "per_decoder", gen_rule = "multinomial";
  std::string gen_space = "pre_softmax";
  int gen_n = 10;
  std::uint64_t gen_seed = 0;
  double gen_temp = 1.0;
  gen_cmd->add_option("--checkpoint", gen_ckpt, "model checkpoint")->required();
  gen_cmd->add_option("--corpus", gen_corpus, "training CSV (stats + novelty)")
      ->required();
  gen_cmd->add_option("--regime", gen_regime, "in_domain|ood");
  gen_cmd->add_option("--property", gen_property, "molwt|logp|qed");
  gen_cmd->add_option("--n", gen_n, "generations per anchor");
  gen_cmd->add_option("--seed", gen_seed, "master random seed");
  gen_cmd->add_option("--out", gen_out, "output CSV");
  gen_cmd->add_option("--latent", gen_latent, "shared|per_decoder");
  gen_cmd->add_option("--rule", gen_rule, "greedy|multinomial");
  gen_cmd->add_option("--space", gen_space, "pre_softmax|post_softmax");
  gen_cmd->add_option("--temperature", gen_temp, "sampling temperature");

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "compute metric reports");
  eval_cmd->add_option("--config", config_sink,
                      "flat key=value config file (flags override)");
  std::string eval_ckpt, eval_seen, eval_unseen, eval_gen, eval_out = "report";
  eval_cmd->add_option("--checkpoint", eval_ckpt, "model checkpoint");
  eval_cmd->add_option("--seen", eval_seen, "seen (training) corpus CSV");
  eval_cmd->add_option("--unseen", eval_unseen, "held-out corpus CSV");
  eval_cmd->add_option("--generated", eval_gen, "generation CSV to score");
  eval_cmd->add_option("--out", eval_out, "report path prefix");

  // sweep-k
  auto* sweep_cmd = app.add_subcommand("sweep-k", "train across decoder counts");
  sweep_cmd->add_option("--config", config_sink,
                      "flat key=value config file (flags override)");
  std::string sweep_corpus, sweep_out = "sweep";
  std::vector<int> sweep_ks{2, 3};
  sweep_cmd->add_option("--corpus", sweep_corpus, "training CSV")->required();
  sweep_cmd->add_option("--k-list", sweep_ks, "decoder counts to sweep");
  sweep_cmd->add_option("--out", sweep_out, "output directory");
  ModelFlags sweep_mf;
  sweep_mf.attach(sweep_cmd);
  TrainFlags sweep_tf;
  sweep_tf.epochs = 5;
  sweep_tf.attach(sweep_cmd);

  // tokenize / validate
  auto* tok_cmd = app.add_subcommand("tokenize", "tokenize a SMILES string");
  std::string tok_smiles;
  tok_cmd->add_option("smiles", tok_smiles, "SMILES string")->required();

  auto* val_cmd = app.add_subcommand("validate", "check SMILES validity");
  std::string val_smiles;
  bool val_strict = false;
  val_cmd->add_option("smiles", val_smiles, "SMILES string")->required();
  val_cmd->add_flag("--strict", val_strict, "enforce valence limits");

  try {
    std::vector<std::string> args = expand_config_args(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (train_cmd->parsed())
      return run_train(train_corpus, train_mf, train_tf, train_out, train_cmd);
    if (gen_cmd->parsed())
      return run_generate(gen_ckpt, gen_corpus, gen_regime, gen_property,
                          gen_n, gen_seed, gen_out, gen_latent, gen_rule,
                          gen_space, gen_temp);
    if (eval_cmd->parsed())
      return run_evaluate(eval_ckpt, eval_seen, eval_unseen, eval_gen,
                          eval_out);
    if (sweep_cmd->parsed())
      return run_sweep(sweep_corpus, sweep_mf, sweep_tf, sweep_ks, sweep_out);
    if (tok_cmd->parsed()) return run_tokenize(tok_smiles);
    if (val_cmd->parsed()) return run_validate(val_smiles, val_strict);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
