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

// End-to-end staging: configuration, artifacts with provenance hashes, and
// the stage functions shared by the CLI and the acceptance run.

#pragma once

#include "gftgcn/attack.hpp"
#include "gftgcn/corpus.hpp"
#include "gftgcn/features.hpp"
#include "gftgcn/gcn.hpp"
#include "gftgcn/metrics.hpp"
#include "gftgcn/protect.hpp"

#include <atomic>
#include <chrono>
#include <exception>
#include <mutex>
#include <thread>

namespace gftgcn {

struct ScheduleConfig {
  int t = 50;
  double beta_first = 1e-4;
  double beta_last = 0.02;

  NoiseSchedule build() const { return NoiseSchedule::linear(t, beta_first, beta_last); }
};

inline void to_json(nlohmann::json& j, const ScheduleConfig& v) {
  j = nlohmann::json{{"T", v.t}, {"beta_first", v.beta_first}, {"beta_last", v.beta_last}};
}

inline void from_json(const nlohmann::json& j, ScheduleConfig& v) {
  json_field(j, "T", v.t);
  json_field(j, "beta_first", v.beta_first);
  json_field(j, "beta_last", v.beta_last);
}

struct PipelineConfig {
  CorpusSpec corpus;
  int k = 10;
  std::vector<int> allowed_k{10, 20, 25};
  GcnConfig gcn;
  PhiConfig phi;
  ScheduleConfig schedule;
  ProtectTrainConfig protect;
  AttackConfig attack;
  std::uint64_t split_seed = 7;
  std::uint64_t eval_seed = 9;
  bool use_gcn = true;
  int entropy_bins = 32;
  int entropy_keys = 32;  // independent keys per scan in the entropy sample
  // Run-only knobs, excluded from the hash.
  std::string cache_dir;
  int workers = 0;  // 0 = hardware concurrency

  int d() const { return gcn.d; }

  /// Propagates K and d into the sub-configs that repeat them.
  void sync() {
    gcn.k = k;
    phi.d = gcn.d;
  }

  /// One master seed drives every stochastic stage.
  void reseed(std::uint64_t seed) {
    corpus.master_seed = seed;
    split_seed = seed;
    eval_seed = derive_seed(seed, "eval");
    gcn.seed = derive_seed(seed, "gcn");
    phi.seed = derive_seed(seed, "phi");
    protect.seed = derive_seed(seed, "protect");
    attack.seed = derive_seed(seed, "attack");
  }

  void validate() const {
    if (std::find(allowed_k.begin(), allowed_k.end(), k) == allowed_k.end()) {
      throw PreconditionError("K=" + std::to_string(k) + " is not in the configured set");
    }
    if (gcn.k != k || phi.d != gcn.d) throw PreconditionError("pipeline config is out of sync; call sync()");
    if (gcn.n != kDescriptorCount) throw PreconditionError("GCN input width must equal the descriptor count");
    if (schedule.t < 1) throw PreconditionError("T must be at least 1");
    if (entropy_bins < 2 || entropy_keys < 1) throw PreconditionError("entropy sampling needs >= 2 bins and >= 1 key");
    const auto& w = protect.weights;
    for (double x : {w.lambda_imp, w.lambda_diff, w.beta_imp, w.beta_other, w.lambda_u, w.lambda_d}) {
      if (!(x >= 0.0)) throw PreconditionError("loss weights must be non-negative");
    }
    const auto issues = validate_corpus_spec(corpus);
    if (!issues.empty()) throw PreconditionError("corpus spec: " + issues.front());
    gftgcn::validate(attack);
    schedule.build();
  }
};

inline void to_json(nlohmann::json& j, const PipelineConfig& v) {
  j = nlohmann::json{{"corpus", v.corpus},
                     {"K", v.k},
                     {"allowed_K", v.allowed_k},
                     {"gcn", v.gcn},
                     {"phi", v.phi},
                     {"schedule", v.schedule},
                     {"protect", v.protect},
                     {"attack", v.attack},
                     {"split_seed", v.split_seed},
                     {"eval_seed", v.eval_seed},
                     {"use_gcn", v.use_gcn},
                     {"entropy_bins", v.entropy_bins},
                     {"entropy_keys", v.entropy_keys},
                     {"cache_dir", v.cache_dir},
                     {"workers", v.workers}};
}

inline void from_json(const nlohmann::json& j, PipelineConfig& v) {
  if (j.contains("corpus")) {
    nlohmann::json c = v.corpus;
    c.update(j.at("corpus"));
    v.corpus = c.get<CorpusSpec>();
  }
  json_field(j, "K", v.k);
  json_field(j, "allowed_K", v.allowed_k);
  json_field(j, "gcn", v.gcn);
  json_field(j, "phi", v.phi);
  json_field(j, "schedule", v.schedule);
  json_field(j, "protect", v.protect);
  json_field(j, "attack", v.attack);
  json_field(j, "split_seed", v.split_seed);
  json_field(j, "eval_seed", v.eval_seed);
  json_field(j, "use_gcn", v.use_gcn);
  json_field(j, "entropy_bins", v.entropy_bins);
  json_field(j, "entropy_keys", v.entropy_keys);
  json_field(j, "cache_dir", v.cache_dir);
  json_field(j, "workers", v.workers);
  v.sync();
}

/// FNV-1a over the canonical JSON dump, run-only knobs removed.
inline std::uint64_t config_hash(const PipelineConfig& cfg) {
  nlohmann::json j = cfg;
  j.erase("cache_dir");
  j.erase("workers");
  return fnv1a64(j.dump());
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config " + path.string());
  try {
    PipelineConfig cfg = nlohmann::json::parse(in).get<PipelineConfig>();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("malformed config " + path.string() + ": " + e.what());
  }
}

inline void require_hash(std::uint64_t found, std::uint64_t expected, const std::string& what) {
  if (found != expected) {
    throw PreconditionError(what + " was produced by config " + to_hex(found) + " but the current config is " +
                            to_hex(expected));
  }
}

// ---------------------------------------------------------------------------
// Features

struct FeatureSet {
  std::vector<Matrix> f_low;
  std::vector<std::string> subjects;
  std::vector<std::string> scans;
  std::uint64_t config_hash = 0;

  std::size_t size() const { return f_low.size(); }
};

inline constexpr std::string_view kFeatureMagic = "FEAT";
inline constexpr std::uint32_t kFeatureVersion = 1;

namespace detail {

inline void write_string(std::ostream& out, const std::string& s) {
  binio::write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  const auto n = binio::read_u32(in);
  if (n > (1u << 20)) throw ParseError("implausible string length in feature file");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw ParseError("truncated feature file");
  return s;
}

}  // namespace detail

inline void save_features(const std::filesystem::path& path, const FeatureSet& fs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  binio::write_magic(out, kFeatureMagic);
  binio::write_u32(out, kFeatureVersion);
  binio::write_u64(out, fs.config_hash);
  binio::write_u32(out, static_cast<std::uint32_t>(fs.size()));
  for (std::size_t i = 0; i < fs.size(); ++i) {
    detail::write_string(out, fs.subjects[i]);
    detail::write_string(out, fs.scans[i]);
    binio::write_u32(out, static_cast<std::uint32_t>(fs.f_low[i].rows()));
    binio::write_u32(out, static_cast<std::uint32_t>(fs.f_low[i].cols()));
    binio::write_block(out, fs.f_low[i]);
  }
}

inline FeatureSet load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  binio::expect_magic(in, kFeatureMagic);
  if (binio::read_u32(in) != kFeatureVersion) throw ParseError("unsupported feature file version");
  FeatureSet fs;
  fs.config_hash = binio::read_u64(in);
  const auto n = binio::read_u32(in);
  for (std::uint32_t i = 0; i < n; ++i) {
    fs.subjects.push_back(detail::read_string(in));
    fs.scans.push_back(detail::read_string(in));
    const auto rows = binio::read_u32(in);
    const auto cols = binio::read_u32(in);
    fs.f_low.push_back(binio::read_block(in, rows, cols));
  }
  return fs;
}

/// Runs fn(i) for i in [0, n) on a small thread pool; rethrows the first failure.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  std::size_t threads = workers > 0 ? static_cast<std::size_t>(workers) : std::thread::hardware_concurrency();
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
}

inline FeatureSet extract_corpus(const std::vector<Mesh>& corpus, const PipelineConfig& cfg) {
  FeatureSet fs;
  fs.config_hash = config_hash(cfg);
  fs.f_low.resize(corpus.size());
  std::optional<BasisCache> cache;
  if (!cfg.cache_dir.empty()) cache.emplace(cfg.cache_dir);
  ExtractOptions opt;
  opt.k = cfg.k;
  parallel_for(corpus.size(), cfg.workers, [&](std::size_t i) {
    try {
      fs.f_low[i] = extract_features(corpus[i], opt, cache ? &*cache : nullptr);
    } catch (const Error& e) {
      throw Error("scan " + corpus[i].subject_id + "/" + corpus[i].scan_id + ": " + e.what());
    }
  });
  for (const auto& m : corpus) {
    fs.subjects.push_back(m.subject_id);
    fs.scans.push_back(m.scan_id);
  }
  return fs;
}

// ---------------------------------------------------------------------------
// Training stages

inline DatasetSplit pipeline_split(const FeatureSet& fs, const PipelineConfig& cfg) {
  return split_subjects(fs.subjects, cfg.split_seed);
}

inline std::vector<ScanPair> split_pairs(const FeatureSet& fs, const std::vector<std::string>& subjects,
                                         const PipelineConfig& cfg, std::string_view which) {
  return make_pairs(fs.subjects, subjects, derive_seed(cfg.split_seed, which));
}

inline GcnModel train_gcn_stage(const FeatureSet& fs, const PipelineConfig& cfg, std::vector<double>* history = nullptr) {
  const auto split = pipeline_split(fs, cfg);
  std::vector<LabeledPair> pairs;
  for (const auto& p : split_pairs(fs, split.train, cfg, "train-pairs")) pairs.push_back({p.a, p.b, p.label});
  GcnModel model = make_gcn(cfg.gcn);
  auto h = train_gcn(model, fs.f_low, pairs);
  if (history != nullptr) *history = std::move(h);
  model.config_hash = config_hash(cfg);
  return model;
}

/// Z for every scan: the GCN embedding, or pooled F_low when the GCN is disabled.
inline std::vector<Vector> embed_all(const FeatureSet& fs, const GcnModel* gcn, const PipelineConfig& cfg) {
  std::vector<Vector> z;
  z.reserve(fs.size());
  if (cfg.use_gcn) {
    if (gcn == nullptr) throw PreconditionError("the GCN stage is enabled but no GCN model was supplied");
    for (const auto& f : fs.f_low) z.push_back(gcn_embed(*gcn, f));
  } else {
    for (const auto& f : fs.f_low) z.push_back(pool_flat_features(f, cfg.d()));
  }
  return z;
}

inline PhiNetwork train_protect_stage(const FeatureSet& fs, const std::vector<Vector>& z, const PipelineConfig& cfg,
                                      ProtectHistory* history = nullptr) {
  const auto split = pipeline_split(fs, cfg);
  const std::set<std::string> train(split.train.begin(), split.train.end());
  std::vector<EmbeddedScan> scans;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (train.count(fs.subjects[i])) scans.push_back({z[i], fs.subjects[i]});
  }
  PhiNetwork phi = make_phi(cfg.phi);
  auto h = train_protect(phi, scans, cfg.schedule.build(), cfg.protect);
  if (history != nullptr) *history = std::move(h);
  phi.config_hash = config_hash(cfg);
  return phi;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Key issued to a subject in evaluation; slot 0 enrolls, later slots re-issue.
inline KeyMaterial evaluation_key(const PipelineConfig& cfg, const std::string& subject, int slot) {
  return KeyMaterial::from_seed(derive_seed(cfg.eval_seed, "subject-key", fnv1a64(subject), static_cast<std::uint64_t>(slot)));
}

struct PipelineEvaluation {
  std::vector<std::string> subjects;
  EvalReport unprotected;
  EvalReport protected_report;
  double unprotected_genuine_mean = 0.0;
  double protected_genuine_mean = 0.0;
  std::uint64_t config_hash = 0;
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Pairs over `subjects`. Protected impostor probes are diffused under the
/// claimed subject's key, so the score measures the face, not the key.
inline PipelineEvaluation evaluate_pipeline(const FeatureSet& fs, const std::vector<Vector>& z, const PhiNetwork& phi,
                                            const PipelineConfig& cfg, const std::vector<std::string>& subjects,
                                            std::string_view pair_tag = "test-pairs") {
  const auto schedule = cfg.schedule.build();
  const auto pairs = split_pairs(fs, subjects, cfg, pair_tag);
  std::map<std::string, KeyMaterial> enroll_key;
  std::map<std::string, KeyMaterial> reissue_key;
  for (const auto& s : subjects) {
    enroll_key.emplace(s, evaluation_key(cfg, s, 0));
    reissue_key.emplace(s, evaluation_key(cfg, s, 1));
  }
  std::map<std::pair<std::size_t, std::uint64_t>, Vector> memo;
  auto protect = [&](std::size_t scan, const KeyMaterial& key) -> const Vector& {
    const auto id = std::make_pair(scan, key.key_id());
    auto it = memo.find(id);
    if (it == memo.end()) it = memo.emplace(id, diffuse(z[scan], key, schedule, phi, cfg.k).z_t).first;
    return it->second;
  };

  ScoreSet plain;
  ScoreSet guarded;
  for (const auto& p : pairs) {
    (p.label ? plain.genuine : plain.impostor).push_back(cosine_similarity(z[p.a], z[p.b]));
    const KeyMaterial& key = enroll_key.at(fs.subjects[p.a]);
    (p.label ? guarded.genuine : guarded.impostor).push_back(cosine_similarity(protect(p.a, key), protect(p.b, key)));
  }

  PipelineEvaluation out;
  out.subjects = subjects;
  out.config_hash = config_hash(cfg);
  out.unprotected = evaluate_scores(plain);
  out.protected_report = evaluate_scores(guarded);
  out.unprotected_genuine_mean = mean_of(plain.genuine);
  out.protected_genuine_mean = mean_of(guarded.genuine);

  const std::set<std::string> wanted(subjects.begin(), subjects.end());
  std::vector<std::size_t> scans;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    if (wanted.count(fs.subjects[i])) scans.push_back(i);
  }
  std::vector<TemplateSample> samples;
  for (auto i : scans) {
    for (const auto* keys : {&enroll_key, &reissue_key}) {
      const KeyMaterial& key = keys->at(fs.subjects[i]);
      samples.push_back({protect(i, key), fs.subjects[i], key.key_id()});
    }
  }
  out.protected_report.correlation = key_correlation_matrix(samples);

  // Entropy sample: every scan under entropy_keys independent keys.
  const auto rows = static_cast<Eigen::Index>(scans.size()) * cfg.entropy_keys;
  Matrix zs(rows, cfg.d());
  std::vector<KeyMaterial> keys;
  Eigen::Index r = 0;
  for (auto i : scans) {
    for (int k = 0; k < cfg.entropy_keys; ++k) {
      zs.row(r++) = z[i].transpose();
      keys.push_back(KeyMaterial::from_seed(derive_seed(cfg.eval_seed, "entropy-key", i, static_cast<std::uint64_t>(k))));
    }
  }
  out.protected_report.entropy = entropy_mi_report(zs, diffuse_rows(zs, keys, schedule, phi), cfg.entropy_bins);
  return out;
}

inline nlohmann::json to_json(const PipelineEvaluation& e) {
  return {{"config_hash", to_hex(e.config_hash)},
          {"subjects", e.subjects},
          {"unprotected", to_json(e.unprotected)},
          {"protected", to_json(e.protected_report)},
          {"unprotected_genuine_mean", e.unprotected_genuine_mean},
          {"protected_genuine_mean", e.protected_genuine_mean}};
}

/// White-box attack on the protected templates of `subjects`; the attacker
/// knows each target's key unless cfg.attack.use_key is false. All targets
/// run as one batch, row t * restarts + r under target t's key.
inline AttackReport attack_pipeline(const FeatureSet& fs, const std::vector<Vector>& z, const PhiNetwork& phi,
                                    const PipelineConfig& cfg, const std::vector<std::string>& subjects,
                                    double threshold_best, std::size_t max_targets = 0) {
  const auto schedule = cfg.schedule.build();
  const std::set<std::string> wanted(subjects.begin(), subjects.end());
  std::vector<Vector> targets;
  std::vector<KeyMaterial> row_keys;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    if (!wanted.count(fs.subjects[i])) continue;
    if (max_targets > 0 && targets.size() == max_targets) break;
    const KeyMaterial key = evaluation_key(cfg, fs.subjects[i], 0);
    targets.push_back(diffuse(z[i], key, schedule, phi, cfg.k).z_t);
    const KeyMaterial attacker_key =
        cfg.attack.use_key ? key : KeyMaterial::from_seed(derive_seed(cfg.attack.seed, "attacker-key", i));
    row_keys.insert(row_keys.end(), static_cast<std::size_t>(cfg.attack.restarts), attacker_key);
  }
  if (targets.empty()) throw PreconditionError("no attack targets in the selected subjects");
  const auto oracle = protection_oracle(phi, schedule, row_keys);
  std::vector<double> best;
  for (const auto& r : csa_attack_batch(targets, oracle, cfg.attack)) best.push_back(r.best_similarity);
  return sar_report(best, cfg.attack.thresholds, threshold_best);
}

// ---------------------------------------------------------------------------
// Timing

struct StageTimings {
  double data_preparation = 0.0;    // load + preprocess, seconds per scan
  double feature_extraction = 0.0;  // Laplacian, eigenpairs, descriptors, GFT
  double inference = 0.0;           // GCN + diffusion + match
  std::size_t scans = 0;
};

inline nlohmann::json to_json(const StageTimings& t) {
  return {{"scans", t.scans},
          {"seconds_per_scan",
           {{"data_preparation", t.data_preparation},
            {"feature_extraction", t.feature_extraction},
            {"inference", t.inference}}}};
}

/// Times the three online stages per scan. The basis cache is bypassed so the
/// extraction figure includes the eigendecomposition.
inline StageTimings bench_stages(const std::vector<Mesh>& corpus, const GcnModel* gcn, const PhiNetwork& phi,
                                 const PipelineConfig& cfg) {
  using clock = std::chrono::steady_clock;
  auto seconds = [](clock::duration d) { return std::chrono::duration<double>(d).count(); };
  const auto schedule = cfg.schedule.build();
  StageTimings t;
  t.scans = corpus.size();
  if (corpus.empty()) return t;
  std::vector<Mesh> prepared;
  const auto t0 = clock::now();
  for (const auto& m : corpus) {
    std::ostringstream obj;
    write_obj(m, obj);
    std::istringstream in(obj.str());
    prepared.push_back(normalize_mesh(parse_obj(in)));
  }
  const auto t1 = clock::now();
  std::vector<Matrix> feats;
  for (const auto& m : prepared) {
    feats.push_back(gft(smallest_eigenpairs(normalized_laplacian(build_graph(m)), cfg.k), assemble_descriptors(m)));
  }
  const auto t2 = clock::now();
  double sink = 0.0;
  Vector enrolled;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    const Vector z = cfg.use_gcn ? gcn_embed(*gcn, feats[i]) : pool_flat_features(feats[i], cfg.d());
    const Vector zt = diffuse(z, evaluation_key(cfg, corpus[i].subject_id, 0), schedule, phi, cfg.k).z_t;
    if (i == 0) enrolled = zt;
    sink += match(zt, enrolled, 0.5).similarity;
  }
  const auto t3 = clock::now();
  if (!std::isfinite(sink)) throw NumericError("benchmark produced a non-finite score");
  const auto n = static_cast<double>(corpus.size());
  t.data_preparation = seconds(t1 - t0) / n;
  t.feature_extraction = seconds(t2 - t1) / n;
  t.inference = seconds(t3 - t2) / n;
  return t;
}

}  // namespace gftgcn
