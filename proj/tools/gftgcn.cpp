/*
 * Copyright (c) 2026, The gftgcn Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// gftgcn: operator entry point for every pipeline stage.

#include "gftgcn/pipeline.hpp"
#include "gftgcn/service.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <iostream>

namespace {

using namespace gftgcn;
namespace fs = std::filesystem;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> k;
  std::optional<int> t;
  std::string out;
  bool json = false;
  bool no_gcn = false;
  int workers = 0;
  std::string cache_dir;
};

PipelineConfig resolve_config(const Globals& g) {
  PipelineConfig cfg = g.config_path.empty() ? PipelineConfig{} : load_pipeline_config(g.config_path);
  if (g.seed) cfg.reseed(*g.seed);
  if (g.k) cfg.k = *g.k;
  if (g.t) cfg.schedule.t = *g.t;
  if (g.no_gcn) cfg.use_gcn = false;
  if (g.workers > 0) cfg.workers = g.workers;
  if (!g.cache_dir.empty()) cfg.cache_dir = g.cache_dir;
  cfg.sync();
  cfg.validate();
  return cfg;
}

std::string out_or(const Globals& g, const std::string& fallback) { return g.out.empty() ? fallback : g.out; }

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// Prints the report as JSON, or as `key: value` lines for the scalar fields.
void emit(const Globals& g, const nlohmann::json& report) {
  if (g.json) {
    std::cout << report.dump(2) << '\n';
    return;
  }
  for (const auto& [key, value] : report.items()) {
    if (value.is_primitive()) std::cout << key << ": " << value << '\n';
  }
}

std::vector<Mesh> load_checked_corpus(const fs::path& dir, const PipelineConfig& cfg) {
  nlohmann::json manifest;
  auto corpus = read_corpus(dir, &manifest);
  if (manifest.contains("config_hash")) {
    require_hash(parse_hex_u64(manifest.at("config_hash").get<std::string>()), config_hash(cfg), "corpus " + dir.string());
  }
  return corpus;
}

FeatureSet load_checked_features(const fs::path& path, const PipelineConfig& cfg) {
  auto f = load_features(path);
  require_hash(f.config_hash, config_hash(cfg), "features " + path.string());
  return f;
}

std::optional<GcnModel> load_checked_gcn(const std::string& path, const PipelineConfig& cfg) {
  if (!cfg.use_gcn) return std::nullopt;
  if (path.empty()) throw PreconditionError("this stage needs a GCN checkpoint (--gcn) unless --no-gcn is given");
  auto m = load_gcn(path);
  require_hash(m.config_hash, config_hash(cfg), "GCN checkpoint " + path);
  return m;
}

PhiNetwork load_checked_phi(const std::string& path, const PipelineConfig& cfg) {
  if (path.empty()) throw PreconditionError("this stage needs a protection checkpoint (--phi)");
  auto phi = load_phi(path);
  require_hash(phi.config_hash, config_hash(cfg), "protection checkpoint " + path);
  return phi;
}

KeyMaterial load_or_create_key(const fs::path& path) {
  if (fs::exists(path)) {
    std::ifstream in(path);
    std::string hex;
    in >> hex;
    return KeyMaterial::from_hex(hex);
  }
  const KeyMaterial key = KeyMaterial::random();
  {
    std::ofstream out(path);
    if (!out) throw Error("cannot write key file " + path.string());
    out << key.to_hex() << '\n';
  }
  fs::permissions(path, fs::perms::owner_read | fs::perms::owner_write, fs::perm_options::replace);
  return key;
}

std::pair<std::string, std::uint16_t> parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) throw PreconditionError("server must be host:port");
  const int port = std::stoi(text.substr(colon + 1));
  if (port < 1 || port > 65535) throw PreconditionError("port out of range");
  return {text.substr(0, colon), static_cast<std::uint16_t>(port)};
}

/// Client-side template computation: mesh -> F_low -> Z -> Z_T.
ProtectedTemplate client_template(const std::string& mesh_path, const std::string& gcn_path, const std::string& phi_path,
                                  const KeyMaterial& key, const PipelineConfig& cfg, bool crop) {
  const auto gcn = load_checked_gcn(gcn_path, cfg);
  const auto phi = load_checked_phi(phi_path, cfg);
  ExtractOptions opt;
  opt.k = cfg.k;
  opt.crop = crop;
  const Matrix f = extract_features(load_mesh(mesh_path), opt);
  const Vector z = cfg.use_gcn ? gcn_embed(*gcn, f) : pool_flat_features(f, cfg.d());
  return diffuse(z, key, cfg.schedule.build(), phi, cfg.k);
}

std::vector<std::string> split_by_name(const DatasetSplit& split, const std::string& name) {
  if (name == "test") return split.test;
  if (name == "val") return split.val;
  if (name == "train") return split.train;
  throw PreconditionError("unknown split " + name);
}

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gftgcn: spectral 3D face templates with keyed diffusion protection"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "Pipeline config (JSON)");
  app.add_option("--seed", g.seed, "Master seed for every stochastic stage");
  app.add_option("--K", g.k, "Number of spectral coefficients");
  app.add_option("--T", g.t, "Diffusion steps");
  app.add_option("--out", g.out, "Output path");
  app.add_flag("--json", g.json, "Machine-readable output");
  app.add_flag("--no-gcn", g.no_gcn, "Protect pooled F_low instead of the GCN embedding");
  app.add_option("--workers", g.workers, "Extraction worker threads (0 = all cores)");
  app.add_option("--cache", g.cache_dir, "Eigenbasis cache directory");

  std::string corpus_dir;
  std::string features_path;
  std::string gcn_path;
  std::string phi_path;
  std::string mesh_path;
  std::string user;
  std::string key_path;
  std::string server = "127.0.0.1:" + std::to_string(kDefaultPort);
  std::string split_name = "test";
  std::string service_config_path;
  double threshold = -2.0;
  int port = -1;
  std::string journal;
  std::string audit;
  bool crop = false;
  bool attack_without_key = false;
  std::size_t max_targets = 0;

  auto* gen = app.add_subcommand("gen-synth", "Generate the synthetic mesh corpus");
  auto* extract = app.add_subcommand("extract", "Compute F_low for every scan of a corpus");
  extract->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  auto* train_g = app.add_subcommand("train-gcn", "Train the GCN on training-split pairs");
  train_g->add_option("--features", features_path, "Feature file")->required();
  auto* train_p = app.add_subcommand("train-protect", "Train the protection network");
  train_p->add_option("--features", features_path, "Feature file")->required();
  train_p->add_option("--gcn", gcn_path, "GCN checkpoint");

  auto add_client = [&](CLI::App* sub) {
    sub->add_option("--mesh", mesh_path, "Mesh file (OBJ or PLY)")->required();
    sub->add_option("--user", user, "User id")->required();
    sub->add_option("--key", key_path, "Key file; created on first use")->required();
    sub->add_option("--gcn", gcn_path, "GCN checkpoint");
    sub->add_option("--phi", phi_path, "Protection checkpoint")->required();
    sub->add_option("--server", server, "host:port of the verification service");
    sub->add_flag("--crop", crop, "Crop a captured scan to the face region");
  };
  auto* enroll = app.add_subcommand("enroll", "Enroll a protected template with the service");
  add_client(enroll);
  auto* verify = app.add_subcommand("verify", "Verify a probe against the service");
  add_client(verify);
  auto* revoke = app.add_subcommand("revoke", "Revoke an enrollment");
  revoke->add_option("--user", user, "User id")->required();
  revoke->add_option("--key", key_path, "Key file of the enrollment")->required();
  revoke->add_option("--server", server, "host:port of the verification service");

  auto add_model_inputs = [&](CLI::App* sub) {
    sub->add_option("--features", features_path, "Feature file")->required();
    sub->add_option("--gcn", gcn_path, "GCN checkpoint");
    sub->add_option("--phi", phi_path, "Protection checkpoint")->required();
    sub->add_option("--split", split_name, "Subject split to evaluate (test, val, train)");
  };
  auto* eval = app.add_subcommand("eval", "Accuracy, unlinkability and entropy report");
  add_model_inputs(eval);
  auto* attack = app.add_subcommand("attack", "White-box pre-image attack and SAR");
  add_model_inputs(attack);
  attack->add_flag("--without-key", attack_without_key, "Attacker guesses a key instead of holding the victim's");
  attack->add_option("--max-targets", max_targets, "Attack at most this many templates (0 = all)");
  auto* tradeoff = app.add_subcommand("tradeoff", "Evaluate the entropy/EER trade-off model on the K x T grid");
  auto* serve = app.add_subcommand("serve", "Run the verification service");
  serve->add_option("--service-config", service_config_path, "Service config (JSON)");
  serve->add_option("--port", port, "Listening port (0 = ephemeral)");
  serve->add_option("--journal", journal, "Template store journal");
  serve->add_option("--audit", audit, "Audit log");
  serve->add_option("--threshold", threshold, "Decision threshold");
  auto* bench = app.add_subcommand("bench", "Per-stage wall time per scan");
  bench->add_option("--corpus", corpus_dir, "Corpus directory (default: generate from config)");
  bench->add_option("--gcn", gcn_path, "GCN checkpoint");
  bench->add_option("--phi", phi_path, "Protection checkpoint")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const PipelineConfig cfg = resolve_config(g);
    const std::uint64_t hash = config_hash(cfg);
    const nlohmann::json provenance = {{"config_hash", to_hex(hash)}, {"config", cfg}};

    if (gen->parsed()) {
      const fs::path dir = out_or(g, "corpus");
      write_corpus(generate_corpus(cfg.corpus), cfg.corpus, dir, provenance);
      emit(g, {{"corpus", dir.string()},
               {"scans", cfg.corpus.subject_count * cfg.corpus.scans_per_subject},
               {"config_hash", to_hex(hash)}});
    } else if (extract->parsed()) {
      const auto corpus = load_checked_corpus(corpus_dir, cfg);
      const auto t0 = std::chrono::steady_clock::now();
      const FeatureSet f = extract_corpus(corpus, cfg);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const fs::path out = out_or(g, "features.bin");
      save_features(out, f);
      emit(g, {{"features", out.string()}, {"scans", f.size()}, {"seconds", secs}, {"config_hash", to_hex(hash)}});
    } else if (train_g->parsed()) {
      if (!cfg.use_gcn) throw PreconditionError("train-gcn is meaningless with --no-gcn");
      const auto f = load_checked_features(features_path, cfg);
      std::vector<double> history;
      const GcnModel model = train_gcn_stage(f, cfg, &history);
      const fs::path out = out_or(g, "gcn.bin");
      save_gcn(out, model);
      emit(g, {{"checkpoint", out.string()},
               {"epochs", history.size()},
               {"final_loss", history.empty() ? 0.0 : history.back()},
               {"loss_history", history},
               {"config_hash", to_hex(hash)}});
    } else if (train_p->parsed()) {
      const auto f = load_checked_features(features_path, cfg);
      const auto gcn = load_checked_gcn(gcn_path, cfg);
      const auto z = embed_all(f, gcn ? &*gcn : nullptr, cfg);
      ProtectHistory history;
      const PhiNetwork phi = train_protect_stage(f, z, cfg, &history);
      const fs::path out = out_or(g, "phi.bin");
      save_phi(out, phi);
      emit(g, {{"checkpoint", out.string()},
               {"epochs", history.total.size()},
               {"final_loss", history.total.empty() ? 0.0 : history.total.back()},
               {"loss_history", history.total},
               {"config_hash", to_hex(hash)}});
    } else if (enroll->parsed() || verify->parsed()) {
      const KeyMaterial key = load_or_create_key(key_path);
      const auto tmpl = client_template(mesh_path, gcn_path, phi_path, key, cfg, crop);
      const auto [host, p] = parse_endpoint(server);
      NdjsonClient client(host, p);
      const auto reply = client.request(enroll->parsed() ? enroll_request(user, tmpl, 1) : verify_request(user, tmpl, 1));
      emit(g, reply);
      if (!reply.value("ok", false)) return 2;
      if (verify->parsed() && !reply.value("match", false)) return 3;
    } else if (revoke->parsed()) {
      std::ifstream in(key_path);
      std::string hex;
      if (!(in >> hex)) throw Error("cannot read key file " + key_path);
      const auto [host, p] = parse_endpoint(server);
      NdjsonClient client(host, p);
      const auto reply = client.request(revoke_request(user, KeyMaterial::from_hex(hex).key_id(), 1));
      emit(g, reply);
      if (!reply.value("ok", false)) return 2;
    } else if (eval->parsed() || attack->parsed()) {
      const auto f = load_checked_features(features_path, cfg);
      const auto gcn = load_checked_gcn(gcn_path, cfg);
      const auto phi = load_checked_phi(phi_path, cfg);
      const auto z = embed_all(f, gcn ? &*gcn : nullptr, cfg);
      const auto subjects = split_by_name(pipeline_split(f, cfg), split_name);
      const auto e = evaluate_pipeline(f, z, phi, cfg, subjects, split_name + "-pairs");
      if (eval->parsed()) {
        nlohmann::json report = to_json(e);
        report["split"] = split_name;
        const fs::path out = out_or(g, "eval_report.json");
        write_json_file(out, report);
        const fs::path stem = out.parent_path() / out.stem();
        for (const auto& [tag, r] : {std::pair{"unprotected", &e.unprotected}, {"protected", &e.protected_report}}) {
          std::ofstream roc(stem.string() + "_" + tag + "_roc.csv");
          write_curve_csv(roc, r->roc, "fpr", "tpr");
          std::ofstream pr(stem.string() + "_" + tag + "_pr.csv");
          write_curve_csv(pr, r->pr, "recall", "precision");
          std::ofstream hist(stem.string() + "_" + tag + "_distances.csv");
          write_histogram_csv(hist, r->distances);
        }
        const auto& c = *e.protected_report.correlation;
        const auto& h = *e.protected_report.entropy;
        if (g.json) {
          std::cout << report.dump(2) << '\n';
        } else {
          emit(g, {{"report", out.string()},
                   {"unprotected_eer", e.unprotected.eer.eer},
                   {"unprotected_f1", e.unprotected.f1.f1},
                   {"protected_eer", e.protected_report.eer.eer},
                   {"protected_f1", e.protected_report.f1.f1},
                   {"protected_threshold", e.protected_report.f1.threshold},
                   {"protected_genuine_mean", e.protected_genuine_mean},
                   {"same_subject_diff_key_abs_corr", c.same_subject_diff_key.mean_abs},
                   {"same_subject_diff_key_abs_cos", c.same_subject_diff_key.mean_cos_abs},
                   {"H_Z", h.h_z},
                   {"H_ZT", h.h_zt},
                   {"MI", h.mi}});
        }
      } else {
        PipelineConfig attack_cfg = cfg;
        attack_cfg.attack.use_key = !attack_without_key;
        auto targets = subjects;
        const double theta = e.protected_report.f1.threshold;
        AttackReport r = attack_pipeline(f, z, phi, attack_cfg, targets, theta, max_targets);
        nlohmann::json report = r;
        report["config_hash"] = to_hex(hash);
        report["attacker_holds_key"] = attack_cfg.attack.use_key;
        report["iterations"] = cfg.attack.iterations;
        report["restarts"] = cfg.attack.restarts;
        const fs::path out = out_or(g, "attack_report.json");
        write_json_file(out, report);
        if (g.json) {
          std::cout << report.dump(2) << '\n';
        } else {
          emit(g, {{"report", out.string()},
                   {"targets", r.best_similarity.size()},
                   {"sar_50", r.sar_50},
                   {"sar_75", r.sar_75},
                   {"threshold_best", theta},
                   {"sar_best", r.sar_best.value_or(0.0)}});
        }
      }
    } else if (tradeoff->parsed()) {
      const TradeoffParams params;
      nlohmann::json grid = nlohmann::json::array();
      for (const auto& p : tradeoff_grid(cfg.allowed_k, {0, 25, 50, 75}, params)) {
        grid.push_back({{"K", p.k}, {"T", p.t}, {"delta_H", p.delta_h}, {"delta_EER", p.delta_eer}});
      }
      const nlohmann::json report = {{"params", {{"c", params.c}, {"C", params.big_c}, {"A", params.a},
                                                 {"alpha", params.alpha}, {"N", params.n}}},
                                     {"grid", grid}};
      if (!g.out.empty()) write_json_file(g.out, report);
      if (g.json) {
        std::cout << report.dump(2) << '\n';
      } else {
        std::printf("%4s %4s %12s %12s\n", "K", "T", "delta_H", "delta_EER");
        for (const auto& p : grid) {
          std::printf("%4d %4d %12.6f %12.6f\n", p["K"].get<int>(), p["T"].get<int>(), p["delta_H"].get<double>(),
                      p["delta_EER"].get<double>());
        }
      }
    } else if (serve->parsed()) {
      ServiceConfig sc;
      if (!service_config_path.empty()) {
        std::ifstream in(service_config_path);
        if (!in) throw Error("cannot read service config " + service_config_path);
        sc = nlohmann::json::parse(in).get<ServiceConfig>();
      }
      sc.params = {cfg.k, cfg.schedule.t, cfg.d()};
      if (port >= 0) sc.port = static_cast<std::uint16_t>(port);
      if (!journal.empty()) sc.journal = journal;
      if (!audit.empty()) sc.audit_log = audit;
      if (threshold > -2.0) sc.threshold = threshold;
      TemplateStore store(sc.journal);
      std::ofstream audit_out;
      if (!sc.audit_log.empty()) audit_out.open(sc.audit_log, std::ios::app);
      VerificationService service(sc, store, audit_out.is_open() ? &audit_out : nullptr);
      NdjsonServer server_(service, sc.host, sc.port);
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      server_.start(sc.threads);
      std::cout << "listening on " << sc.host << ':' << server_.port() << " (" << store.size() << " templates)"
                << std::endl;
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      server_.stop();
    } else if (bench->parsed()) {
      const auto corpus = corpus_dir.empty() ? generate_corpus(cfg.corpus) : load_checked_corpus(corpus_dir, cfg);
      const auto gcn = load_checked_gcn(gcn_path, cfg);
      const auto phi = load_checked_phi(phi_path, cfg);
      const StageTimings t = bench_stages(corpus, gcn ? &*gcn : nullptr, phi, cfg);
      if (g.json) {
        std::cout << nlohmann::json(to_json(t)).dump(2) << '\n';
      } else {
        std::printf("scans               %zu\n", t.scans);
        std::printf("data preparation    %.6f s/scan\n", t.data_preparation);
        std::printf("feature extraction  %.6f s/scan\n", t.feature_extraction);
        std::printf("inference           %.6f s/scan\n", t.inference);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
