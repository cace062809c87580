// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "rankuncert/checkpoint.hpp"
#include "rankuncert/cli.hpp"
#include "rankuncert/core_math.hpp"
#include "rankuncert/data.hpp"
#include "rankuncert/evaluation.hpp"
#include "rankuncert/gradcheck.hpp"
#include "rankuncert/losses.hpp"
#include "rankuncert/training.hpp"
#include "support/helpers.hpp"

namespace rankuncert {
namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool passed = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && passed) {
      passed = false;
      detail = what;
    }
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// -- 1 -------------------------------------------------------------------------

Outcome gradient_fidelity() {
  Outcome o;
  const auto t0 = Clock::now();
  GradcheckOptions options;  // 100 instances, step 1e-5, tolerance 1e-4
  const auto results = run_gradcheck(options);
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  for (const auto& r : results) {
    worst = std::max(worst, r.max_relative_error);
    o.require(r.instances >= 100, r.component + " ran fewer than 100 instances");
    o.require(r.passed && r.max_relative_error < 1e-4,
              r.component + " relative error " + fmt("%.3e", r.max_relative_error));
  }
  o.require(results.size() == gradcheck_components().size(), "missing components");
  o.require(elapsed < 120.0, "runtime " + fmt("%.1f s", elapsed));
  if (o.passed) {
    o.detail = std::to_string(results.size()) + " components x 100 instances, max rel err " +
               fmt("%.2e", worst) + ", " + fmt("%.1f s", elapsed);
  }
  return o;
}

// -- 2 -------------------------------------------------------------------------

Outcome reduction_identities() {
  Outcome o;
  Rng rng(2024);
  int checks = 0;
  for (int t = 0; t < 500; ++t) {
    const int b = 2 + t % 7;
    const int d = 3 + t % 5;
    const BatchFeatures batch(rng.normal_matrix(b, d), rng.normal_matrix(b, d));
    const double cl = loss_cl(batch);

    // (a) gamma = 0
    o.require(loss_cs_pair(batch, EpochContext(7, 7, 45)) == cl, "gamma=0 differs from loss_cl");
    o.require(loss_cs_pair(batch, EpochContext(2, 7, 30).without_mining()) == cl,
              "unmined loss differs from loss_cl");

    // (b) n = 0, DR off: total objective is L_CL of the fused features
    TrainConfig config;
    config.ablation = Ablation::preset("baseline");
    config.combiner = CombinerMode::kConcatProject;
    Model model = Model::initialize(config.model_shape(d), rng);
    ad::Tape tape;
    const BoundModel bound = bind_model(tape, model);
    BatchInputs inputs{rng.normal_matrix(b, d), rng.normal_matrix(b, d), rng.normal_matrix(b, d),
                       {}, {}};
    const Objective obj = build_objective(bound, tape, inputs, EpochContext(0, 10, 45), config);
    ad::Tape ref;
    const double fused_cl =
        loss_cl(combine(ref.constant(inputs.source_images), ref.constant(inputs.source_texts),
                        CombinerMode::kConcatProject, ref.constant(model.combiner().projection),
                        ref.constant(model.combiner().bias)),
                ref.constant(inputs.targets))
            .scalar();
    o.require(!obj.dr.has_value(), "DR present with DR off");
    o.require(obj.total.scalar() == fused_cl, "n=0/DR-off total differs from L_CL");

    // (c) B = 1
    const BatchFeatures one(rng.normal_matrix(1, d), rng.normal_matrix(1, d));
    o.require(loss_cl(one) == 0.0, "loss_cl nonzero at B=1");
    std::vector<std::vector<DiagGaussian>> s1(1), t1(1);
    for (int level = 0; level < 2; ++level) {
      s1[0].emplace_back(Vector::from_row(rng.normal_matrix(1, d)),
                         Vector::from_row(rng.uniform_matrix(1, d, 0.2, 2.0)));
      t1[0].emplace_back(Vector::from_row(rng.normal_matrix(1, d)),
                         Vector::from_row(rng.uniform_matrix(1, d, 0.2, 2.0)));
    }
    o.require(loss_dr(s1, t1) == 0.0, "loss_dr nonzero at B=1");

    // (d) identical grids
    std::vector<DiagGaussian> levels;
    for (int level = 0; level < 2; ++level) {
      levels.emplace_back(Vector::from_row(rng.normal_matrix(1, d)),
                          Vector::from_row(rng.uniform_matrix(1, d, 0.2, 2.0)));
    }
    const std::vector<std::vector<DiagGaussian>> grid(static_cast<std::size_t>(b), levels);
    const double dr = loss_dr(grid, grid);
    o.require(std::abs(dr - std::log(static_cast<double>(b))) <= 1e-10,
              "identical grids give " + fmt("%.17g", dr));
    checks += 7;
  }
  if (o.passed) o.detail = std::to_string(checks) + " identity checks over 500 instances";
  return o;
}

// -- 3 -------------------------------------------------------------------------

double brute_w2(const std::vector<double>& m1, const std::vector<double>& s1,
                const std::vector<double>& m2, const std::vector<double>& s2) {
  double sum = 0;
  for (std::size_t i = 0; i < m1.size(); ++i) {
    sum += (m1[i] - m2[i]) * (m1[i] - m2[i]) + (s1[i] - s2[i]) * (s1[i] - s2[i]);
  }
  return sum;
}

Outcome wasserstein_suite() {
  Outcome o;
  Rng rng(3);
  double worst = 0;
  for (int t = 0; t < 10000; ++t) {
    const int d = 1 + t % 16;
    auto draw = [&](std::vector<double>& m, std::vector<double>& s) {
      m.resize(static_cast<std::size_t>(d));
      s.resize(static_cast<std::size_t>(d));
      for (int i = 0; i < d; ++i) {
        m[static_cast<std::size_t>(i)] = 3 * rng.normal();
        s[static_cast<std::size_t>(i)] = rng.uniform(1e-3, 4.0);
      }
    };
    std::vector<double> m1, s1, m2, s2;
    draw(m1, s1);
    draw(m2, s2);
    const DiagGaussian a{Vector(m1), Vector(s1)}, b{Vector(m2), Vector(s2)};
    const double ab = wasserstein2_sq(a, b), ba = wasserstein2_sq(b, a);
    const double ref = brute_w2(m1, s1, m2, s2);
    worst = std::max(worst, std::abs(ab - ref));
    o.require(ab == ba, "asymmetric at pair " + std::to_string(t));
    o.require(ab >= 0, "negative at pair " + std::to_string(t));
    o.require(ab > 0, "zero for distinct pair " + std::to_string(t));
    o.require(wasserstein2_sq(a, a) == 0.0, "nonzero self distance at pair " + std::to_string(t));
    o.require(std::abs(ab - ref) <= 1e-10, "brute-force mismatch at pair " + std::to_string(t));
  }
  if (o.passed) o.detail = "10000 pairs, max |W2^2 - brute| " + fmt("%.1e", worst);
  return o;
}

// -- 4 -------------------------------------------------------------------------

Outcome evaluation_oracle() {
  Outcome o;
  Rng rng(4);
  auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng.engine()() % n); };
  for (int inst = 0; inst < 1000 && o.passed; ++inst) {
    const std::size_t n = 1 + pick(200);
    const int d = 2 + static_cast<int>(pick(15));
    const Matrix feats = rng.normal_matrix(static_cast<Eigen::Index>(n), d);
    std::vector<std::string> ids;
    std::vector<std::vector<double>> gv;
    for (std::size_t i = 0; i < n; ++i) {
      ids.push_back("img" + std::to_string(rng.engine()() % 100000) + "_" + std::to_string(i));
      const auto r = feats.row(static_cast<Eigen::Index>(i));
      gv.emplace_back(r.data(), r.data() + d);
    }
    const Gallery gallery(ids, feats);

    const std::size_t nq = 1 + pick(20);
    std::vector<Query> queries;
    std::vector<std::size_t> full_ranks, subset_ranks;
    const std::size_t subset_size = std::min<std::size_t>(n, 1 + pick(8));
    for (std::size_t q = 0; q < nq; ++q) {
      const Matrix qf = rng.normal_matrix(1, d);
      const std::vector<double> qv(qf.data(), qf.data() + d);
      const std::size_t target = pick(n);
      std::vector<std::size_t> all(n);
      std::iota(all.begin(), all.end(), 0);
      std::vector<std::size_t> members{target};
      std::vector<std::size_t> others;
      for (std::size_t i = 0; i < n; ++i) {
        if (i != target) others.push_back(i);
      }
      std::shuffle(others.begin(), others.end(), rng.engine());
      members.insert(members.end(), others.begin(),
                     others.begin() + static_cast<std::ptrdiff_t>(subset_size - 1));
      std::vector<std::string> subset;
      for (auto m : members) subset.push_back(ids[m]);
      queries.push_back(Query{"q" + std::to_string(q), qf, ids[target], subset, std::nullopt});
      full_ranks.push_back(testing::brute_rank(qv, gv, ids, all, target));
      subset_ranks.push_back(testing::brute_rank(qv, gv, ids, members, target));
    }

    std::vector<int> ks;
    for (std::size_t k = 1; k <= n; k += 1 + pick(10)) ks.push_back(static_cast<int>(k));
    std::vector<int> sks;
    for (std::size_t k = 1; k <= subset_size; ++k) sks.push_back(static_cast<int>(k));

    auto brute_recall = [&](const std::vector<std::size_t>& ranks, int k) {
      std::size_t hits = 0;
      for (auto r : ranks) hits += r <= static_cast<std::size_t>(k) ? 1 : 0;
      return static_cast<double>(hits) / static_cast<double>(ranks.size());
    };
    const RecallReport full = recall_at_k(queries, gallery, ks, 1 + static_cast<int>(inst % 3));
    const RecallReport sub = recall_subset_at_k(queries, gallery, sks);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      o.require(full.recalls[i] == brute_recall(full_ranks, ks[i]),
                "R@" + std::to_string(ks[i]) + " mismatch on instance " + std::to_string(inst));
      if (i > 0) o.require(full.recalls[i - 1] <= full.recalls[i], "non-monotone recall");
    }
    for (std::size_t i = 0; i < sks.size(); ++i) {
      o.require(sub.subset_recalls[i] == brute_recall(subset_ranks, sks[i]),
                "Rs@" + std::to_string(sks[i]) + " mismatch on instance " + std::to_string(inst));
      if (i > 0) o.require(sub.subset_recalls[i - 1] <= sub.subset_recalls[i], "non-monotone subset recall");
    }
  }

  auto single = [](double r) {
    RecallReport rep;
    rep.ks = {10};
    rep.recalls = {r};
    return rep;
  };
  const RecallReport avg = category_average({single(0.3480), single(0.4501), single(0.4768)});
  const std::string shown = fmt("%.2f", 100 * avg.recall_at(10));
  o.require(shown == "42.50", "category average shows " + shown);
  if (o.passed) o.detail = "1000 instances exact, monotone; category average " + shown;
  return o;
}

// -- 5 -------------------------------------------------------------------------

Outcome synthetic_ab() {
  Outcome o;
  const auto t0 = Clock::now();
  const SyntheticWorld world = generate_synthetic(SynthSpec{});
  auto images = std::make_shared<const EmbeddingStore>(world.images);
  auto texts = std::make_shared<const EmbeddingStore>(world.texts);
  const Dataset train = resolve_triplets(world.manifest, Split::kTrain, images, texts);
  const Dataset val = resolve_triplets(world.manifest, Split::kVal, images, texts);

  auto final_r10 = [&](const std::string& preset, std::uint64_t seed) {
    TrainConfig c;
    c.ablation = Ablation::preset(preset);
    c.epochs = 30;
    c.theta_degrees = 45;
    c.n_ua = 2;
    c.combiner = CombinerMode::kConcatProject;
    c.optimizer.learning_rate = 1e-3;
    c.seed = seed;
    const TrainResult r = run_training(c, train, &val);
    EvalOptions options;
    options.ks = {10};
    return evaluate(r.last.model, val, options).recall_at(10);
  };
  double base = 0, full = 0;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    const double b = final_r10("baseline", seed), f = final_r10("full", seed);
    base += b / 3;
    full += f / 3;
    per_seed += " s" + std::to_string(seed) + "=" + fmt("%.3f", b) + "/" + fmt("%.3f", f);
  }
  const double elapsed = seconds_since(t0);
  o.require(full >= base, "full " + fmt("%.4f", full) + " < baseline " + fmt("%.4f", base));
  o.require(full >= 0.90, "full R@10 " + fmt("%.4f", full) + " < 0.90");
  o.require(elapsed < 600, "runtime " + fmt("%.0f s", elapsed));
  o.detail = "val R@10 baseline " + fmt("%.4f", base) + ", full " + fmt("%.4f", full) +
             " (baseline/full:" + per_seed + "), " + fmt("%.0f s", elapsed) +
             (o.passed ? "" : "; " + o.detail);
  return o;
}

// -- 6 -------------------------------------------------------------------------

std::pair<int, std::string> run_cli_captured(std::vector<std::string> args) {
  args.insert(args.begin(), "rankuncert");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str() + (code == 0 ? "" : err.str())};
}

Outcome sweep_harness() {
  Outcome o;
  testing::ScratchDir dir("acceptance-sweep");
  const auto synth = run_cli_captured({"synth", "--out", dir.path().string(), "--train", "512",
                                       "--val", "256"});
  o.require(synth.first == 0, "synth failed: " + synth.second);
  const std::vector<std::string> args = {
      "sweep",     "--images",       (dir / "images.emb").string(), "--texts",
      (dir / "texts.emb").string(),  "--manifest",      (dir / "manifest.jsonl").string(),
      "--epochs",  "3",              "--combiner",      "concat_project",
      "--lr",      "1e-3",           "--thetas",        "30,45,60,75",
      "--n-values", "1,2,3",         "--seed",          "11"};
  const auto first = run_cli_captured(args);
  const auto second = run_cli_captured(args);
  o.require(first.first == 0, "sweep failed: " + first.second);
  std::vector<std::string> lines;
  std::istringstream in(first.second);
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  o.require(lines.size() == 13, "expected header + 12 rows, got " + std::to_string(lines.size()));
  const char* expected[] = {"75,1", "75,2", "75,3", "60,1", "60,2", "60,3",
                            "45,1", "45,2", "45,3", "30,1", "30,2", "30,3"};
  for (std::size_t i = 1; i < lines.size() && i <= 12; ++i) {
    o.require(lines[i].rfind(std::string(expected[i - 1]) + ",", 0) == 0, "row order: " + lines[i]);
    std::istringstream cells(lines[i]);
    std::string cell;
    for (int c = 0; std::getline(cells, cell, ','); ++c) {
      if (c < 2) continue;
      const double v = std::stod(cell);
      o.require(v >= 0.0 && v <= 1.0, "recall out of range: " + lines[i]);
    }
  }
  o.require(first.second == second.second, "sweep output differs between identical runs");
  if (o.passed) o.detail = "12 rows, recalls in [0,1], identical on rerun";
  return o;
}

// -- 7 -------------------------------------------------------------------------

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Outcome determinism_and_persistence() {
  Outcome o;
  SynthSpec spec;
  spec.train_triplets = 256;
  spec.val_triplets = 64;
  const SyntheticWorld world = generate_synthetic(spec);
  auto images = std::make_shared<const EmbeddingStore>(world.images);
  auto texts = std::make_shared<const EmbeddingStore>(world.texts);
  const Dataset train = resolve_triplets(world.manifest, Split::kTrain, images, texts);
  const Dataset val = resolve_triplets(world.manifest, Split::kVal, images, texts);

  TrainConfig c;
  c.epochs = 3;
  c.combiner = CombinerMode::kConcatProject;
  c.optimizer.learning_rate = 1e-3;
  c.seed = 21;
  c.eval_ks = {1, 5, 10};
  const TrainResult a = run_training(c, train, &val);
  const TrainResult b = run_training(c, train, &val);
  const std::string bytes_a = encode_checkpoint(to_checkpoint(a.best, c));
  o.require(bytes_a == encode_checkpoint(to_checkpoint(b.best, c)), "best checkpoints differ");
  o.require(encode_checkpoint(to_checkpoint(a.last, c)) == encode_checkpoint(to_checkpoint(b.last, c)),
            "last checkpoints differ");

  testing::ScratchDir dir("acceptance-persist");
  save_checkpoint(to_checkpoint(a.best, c), dir / "a.runc");
  const Checkpoint loaded = load_checkpoint(dir / "a.runc");
  save_checkpoint(loaded, dir / "b.runc");
  o.require(read_file(dir / "a.runc") == read_file(dir / "b.runc"), "checkpoint round trip differs");
  o.require(encode_checkpoint(to_checkpoint(from_checkpoint(loaded), c)) == bytes_a,
            "checkpoint -> state -> checkpoint differs");

  save_store(world.images, dir / "x.emb");
  save_store(load_store(dir / "x.emb"), dir / "y.emb");
  o.require(read_file(dir / "x.emb") == read_file(dir / "y.emb"), ".emb round trip differs");
  o.require(read_file(dir / "x.ids") == read_file(dir / "y.ids"), ".ids round trip differs");
  if (o.passed) {
    o.detail = "identical checkpoints (" + std::to_string(bytes_a.size()) +
               " bytes); checkpoint and .emb round trips byte-identical";
  }
  return o;
}

}  // namespace
}  // namespace rankuncert

int main() {
  using namespace rankuncert;
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient fidelity", gradient_fidelity},
      {2, "reduction identities", reduction_identities},
      {3, "wasserstein metric suite", wasserstein_suite},
      {4, "evaluation oracle", evaluation_oracle},
      {5, "many-to-many synthetic A/B", synthetic_ab},
      {6, "sweep harness", sweep_harness},
      {7, "determinism and persistence", determinism_and_persistence},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.passed = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failures += o.passed ? 0 : 1;
    std::printf("criterion %d %-28s %s  %s\n", c.id, c.name, o.passed ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures,
              criteria.size());
  return failures == 0 ? 0 : 1;
}
