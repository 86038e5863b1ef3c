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

#include "gftgcn/corpus.hpp"
#include "gftgcn/service.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <sstream>

namespace gftgcn {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("gftgcn_service_" + to_hex(SplitMix64(std::random_device{}()).next()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ProtectedTemplate make_template(std::uint64_t key_seed, std::uint64_t z_seed, int d = 64) {
  SplitMix64 rng(z_seed);
  ProtectedTemplate t;
  t.z_t.resize(d);
  for (int i = 0; i < d; ++i) t.z_t(i) = rng.normal();
  t.params = {10, 50, d};
  t.key_id = KeyMaterial::from_seed(key_seed).key_id();
  return t;
}

struct Fixture {
  ServiceConfig config;
  TemplateStore store;
  std::ostringstream audit;
  VerificationService service;

  explicit Fixture(fs::path journal = {}) : store(std::move(journal)), service(config, store, &audit) {}
};

std::string code_of(const nlohmann::json& r) { return r.at("error").at("code").get<std::string>(); }

TEST(Service, EnrollAddsRecord) {
  Fixture f;
  const auto r = f.service.handle(enroll_request("alice", make_template(1, 1), 7));
  EXPECT_TRUE(r.at("ok").get<bool>());
  EXPECT_EQ(r.at("req_id"), 7);
  EXPECT_EQ(f.store.size(), 1u);
}

TEST(Service, DuplicateEnrollRejected) {
  Fixture f;
  f.service.handle(enroll_request("alice", make_template(1, 1)));
  const auto r = f.service.handle(enroll_request("alice", make_template(1, 2), "x"));
  EXPECT_FALSE(r.at("ok").get<bool>());
  EXPECT_EQ(code_of(r), "duplicate");
  EXPECT_EQ(r.at("req_id"), "x");
  EXPECT_EQ(f.store.size(), 1u);
  EXPECT_TRUE(f.service.handle(enroll_request("alice", make_template(2, 1))).at("ok").get<bool>());
}

TEST(Service, ParameterMismatchRejected) {
  Fixture f;
  const auto r = f.service.handle(enroll_request("alice", make_template(1, 1, 32)));
  EXPECT_EQ(code_of(r), "param_mismatch");
  auto wrong_t = make_template(1, 1);
  wrong_t.params.t = 25;
  EXPECT_EQ(code_of(f.service.handle(enroll_request("alice", wrong_t))), "param_mismatch");
  EXPECT_EQ(f.store.size(), 0u);
}

TEST(Service, MalformedPayloadsRejected) {
  Fixture f;
  for (const std::string line : {"not json", "[1,2]", R"({"op":"ENROLL"})", R"({"op":"NOPE"})", R"({"req_id":3})",
                                 R"({"op":"VERIFY","user_id":"a","key_id":"zz","template":{}})"}) {
    const auto r = nlohmann::json::parse(f.service.handle_line(line));
    EXPECT_FALSE(r.at("ok").get<bool>()) << line;
    EXPECT_EQ(code_of(r), "malformed") << line;
  }
  auto req = enroll_request("alice", make_template(1, 1));
  req["key_id"] = to_hex(KeyMaterial::from_seed(9).key_id());
  EXPECT_EQ(code_of(f.service.handle(req)), "malformed");
  EXPECT_EQ(nlohmann::json::parse(f.service.handle_line(R"({"op":"PING","req_id":3})")).at("req_id"), 3);
}

TEST(Service, VerifyIdenticalTemplateMatches) {
  Fixture f;
  const auto t = make_template(1, 1);
  f.service.handle(enroll_request("alice", t));
  const auto r = f.service.handle(verify_request("alice", t, 1));
  EXPECT_TRUE(r.at("match").get<bool>());
  EXPECT_NEAR(r.at("similarity").get<double>(), 1.0, 1e-12);
  EXPECT_EQ(r.at("threshold").get<double>(), 0.9);
  EXPECT_NE(f.audit.str().find(R"("event":"verify")"), std::string::npos);
}

TEST(Service, ThresholdIsStrict) {
  Fixture f;
  f.config.threshold = 1.0;
  VerificationService strict(f.config, f.store);
  auto t = make_template(1, 1);
  t.z_t = 3.0 * Vector::Unit(64, 5);
  strict.handle(enroll_request("alice", t));
  auto q = t;
  q.z_t = Vector::Unit(64, 5);
  ASSERT_EQ(cosine_similarity(q.z_t, t.z_t), 1.0);
  EXPECT_FALSE(strict.handle(verify_request("alice", q)).at("match").get<bool>());
}

TEST(Service, UnknownUserIsNotEnrolled) {
  Fixture f;
  EXPECT_EQ(code_of(f.service.handle(verify_request("bob", make_template(1, 1)))), "not_enrolled");
}

TEST(Service, RevokeThenVerifyIsNotEnrolled) {
  Fixture f;
  const auto t = make_template(1, 1);
  f.service.handle(enroll_request("alice", t));
  EXPECT_TRUE(f.service.handle(revoke_request("alice", t.key_id)).at("ok").get<bool>());
  EXPECT_EQ(code_of(f.service.handle(verify_request("alice", t))), "not_enrolled");
  EXPECT_EQ(code_of(f.service.handle(revoke_request("alice", t.key_id))), "not_enrolled");
  EXPECT_TRUE(f.service.handle(enroll_request("alice", make_template(2, 3))).at("ok").get<bool>());
}

TEST(Service, UnknownFieldsIgnoredAndNeverStored) {
  TempDir dir;
  Fixture f(dir / "store.jsonl");
  auto req = enroll_request("alice", make_template(1, 1));
  req["raw_embedding"] = "SECRET-RAW-BYTES";
  req["template"]["extra"] = "SECRET-TEMPLATE-FIELD";
  EXPECT_TRUE(f.service.handle(req).at("ok").get<bool>());
  const auto journal = slurp(dir / "store.jsonl");
  EXPECT_EQ(journal.find("SECRET"), std::string::npos);
}

TEST(Store, SurvivesRestartAndCompacts) {
  TempDir dir;
  const auto path = dir / "store.jsonl";
  {
    TemplateStore store(path);
    for (int i = 0; i < 3; ++i) {
      store.enroll({"u" + std::to_string(i), make_template(10 + i, i).key_id, make_template(10 + i, i), "t"});
    }
    store.revoke("u1", make_template(11, 1).key_id);
  }
  const auto before = slurp(path);
  EXPECT_EQ(std::count(before.begin(), before.end(), '\n'), 4);
  TemplateStore reopened(path);
  EXPECT_EQ(reopened.size(), 2u);
  EXPECT_FALSE(reopened.find("u1", make_template(11, 1).key_id));
  const auto r = reopened.find("u2", make_template(12, 2).key_id);
  ASSERT_TRUE(r);
  EXPECT_EQ(r->tmpl.z_t, make_template(12, 2).z_t);
  const auto text = slurp(path);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
}

TEST(Store, TornFinalLineIsSkipped) {
  TempDir dir;
  const auto path = dir / "store.jsonl";
  {
    TemplateStore store(path);
    store.enroll({"u", make_template(1, 1).key_id, make_template(1, 1), "t"});
  }
  {
    std::ofstream out(path, std::ios::app);
    out << R"({"op":"enroll","record":{"user_id":"v")";
  }
  TemplateStore reopened(path);
  EXPECT_EQ(reopened.size(), 1u);
}

class TcpService : public ::testing::Test {
 protected:
  void SetUp() override {
    store_ = std::make_unique<TemplateStore>(dir_ / "store.jsonl");
    audit_ = std::make_unique<std::ofstream>(dir_ / "audit.jsonl");
    service_ = std::make_unique<VerificationService>(config_, *store_, audit_.get());
    server_ = std::make_unique<NdjsonServer>(*service_, "127.0.0.1", 0);
    server_->start(4);
  }
  void TearDown() override { server_->stop(); }

  TempDir dir_;
  ServiceConfig config_;
  std::unique_ptr<TemplateStore> store_;
  std::unique_ptr<std::ofstream> audit_;
  std::unique_ptr<VerificationService> service_;
  std::unique_ptr<NdjsonServer> server_;
};

TEST_F(TcpService, PingEchoesRequestId) {
  NdjsonClient client("127.0.0.1", server_->port());
  const auto r = client.request({{"op", "PING"}, {"req_id", "abc"}});
  EXPECT_EQ(r.at("op"), "PONG");
  EXPECT_EQ(r.at("req_id"), "abc");
}

/// Appends every textual and binary rendering of x an observer could grep for.
void add_double_patterns(double x, std::vector<std::string>& out) {
  out.push_back(nlohmann::json(x).dump());
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  out.emplace_back(buf);
  std::snprintf(buf, sizeof buf, "%.6f", x);
  if (std::abs(x) > 1e-3) out.emplace_back(buf);
  std::string raw(sizeof x, '\0');
  std::memcpy(raw.data(), &x, sizeof x);
  out.push_back(raw);
}

TEST_F(TcpService, WireAndDiskCarryNoSensitiveBytes) {
  CorpusSpec spec;
  spec.subject_count = 1;
  spec.scans_per_subject = 1;
  spec.vertex_count = 162;
  const auto mesh = generate_corpus(spec).front();
  PhiNetwork phi = make_phi({});
  const auto schedule = NoiseSchedule::linear(50);
  const KeyMaterial key = KeyMaterial::from_seed(77);
  SplitMix64 rng(3);
  Vector z(64);
  for (int i = 0; i < 64; ++i) z(i) = rng.normal();
  z.normalize();
  const auto t = diffuse(z, key, schedule, phi);

  std::string transcript;
  {
    NdjsonClient client("127.0.0.1", server_->port(), &transcript);
    EXPECT_TRUE(client.request(enroll_request("alice", t, 1)).at("ok").get<bool>());
    EXPECT_TRUE(client.request(verify_request("alice", t, 2)).at("match").get<bool>());
    EXPECT_TRUE(client.request(revoke_request("alice", t.key_id, 3)).at("ok").get<bool>());
    EXPECT_TRUE(client.request(enroll_request("alice", t, 4)).at("ok").get<bool>());
  }
  audit_->flush();
  ASSERT_FALSE(transcript.empty());

  std::vector<std::string> sensitive{key.to_hex(), std::string(key.bytes.begin(), key.bytes.end())};
  for (int i = 0; i < z.size(); ++i) add_double_patterns(z(i), sensitive);
  for (std::size_t v = 0; v < 20; ++v) {
    for (int c = 0; c < 3; ++c) add_double_patterns(mesh.vertices[v](c), sensitive);
  }
  for (const auto& [name, bytes] : {std::pair{"wire", transcript}, {"journal", slurp(dir_ / "store.jsonl")},
                                     {"audit", slurp(dir_ / "audit.jsonl")}}) {
    for (const auto& s : sensitive) EXPECT_EQ(bytes.find(s), std::string::npos) << name << " contains " << s;
  }
  // The protected template itself is expected on the wire.
  EXPECT_NE(transcript.find(nlohmann::json(t.z_t(0)).dump()), std::string::npos);
}

TEST_F(TcpService, ConcurrentVerifiesEqualSerial) {
  constexpr int users = 6;
  std::vector<ProtectedTemplate> enrolled;
  std::vector<nlohmann::json> queries;
  {
    NdjsonClient client("127.0.0.1", server_->port());
    for (int u = 0; u < users; ++u) {
      enrolled.push_back(make_template(100 + u, u));
      client.request(enroll_request("u" + std::to_string(u), enrolled.back()));
    }
  }
  for (int q = 0; q < 60; ++q) {
    const int u = q % users;
    auto probe = make_template(100 + u, 1000 + q);
    probe.z_t = enrolled[static_cast<std::size_t>(u)].z_t + (q % 2 == 0 ? 0.2 : 1.0) * probe.z_t / probe.z_t.norm() * enrolled[static_cast<std::size_t>(u)].z_t.norm();
    queries.push_back(verify_request("u" + std::to_string(u), probe, q));
  }
  std::vector<nlohmann::json> serial;
  {
    NdjsonClient client("127.0.0.1", server_->port());
    for (const auto& q : queries) serial.push_back(client.request(q));
  }
  std::vector<nlohmann::json> parallel(queries.size());
  std::vector<std::thread> threads;
  for (int w = 0; w < 6; ++w) {
    threads.emplace_back([&, w] {
      NdjsonClient client("127.0.0.1", server_->port());
      for (std::size_t q = static_cast<std::size_t>(w); q < queries.size(); q += 6) parallel[q] = client.request(queries[q]);
    });
  }
  for (auto& t : threads) t.join();
  int matches = 0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    EXPECT_EQ(parallel[q], serial[q]) << q;
    matches += serial[q].at("match").get<bool>() ? 1 : 0;
  }
  EXPECT_GT(matches, 0);
  EXPECT_LT(matches, static_cast<int>(queries.size()));
}

TEST(ServiceConfig, JsonRoundTrip) {
  ServiceConfig c;
  c.port = 9000;
  c.threshold = 0.75;
  c.params.d = 32;
  nlohmann::json j = c;
  const auto back = j.get<ServiceConfig>();
  EXPECT_EQ(back.port, 9000);
  EXPECT_EQ(back.threshold, 0.75);
  EXPECT_EQ(back.params.d, 32);
}

}  // namespace
}  // namespace gftgcn
