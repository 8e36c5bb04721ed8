// One PASS/FAIL line per criterion; exit status is the number of failures.
#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "batch_fixture.hpp"
#include "genview/batch.hpp"
#include "genview/generation.hpp"
#include "genview/losses.hpp"
#include "genview/math.hpp"
#include "genview/policy.hpp"
#include "genview/quality.hpp"
#include "genview/trainer.hpp"
#include "quality_fixture.hpp"

using namespace genview;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(const char* name, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("threw: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  const bool in_time = budget_s <= 0 || secs < budget_s;
  const bool pass = o.pass && in_time;
  if (!pass) ++failures;
  std::printf("%s %-28s %7.2fs  %s%s\n", pass ? "PASS" : "FAIL", name, secs, o.detail.c_str(),
              in_time ? "" : "  (over time budget)");
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

math::Vector random_vector(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  math::Vector v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

Outcome policy_exactness() {
  const std::vector<std::pair<double, int>> levels{{0.0, 0},    {0.19, 0},  {0.2, 100},
                                                   {0.5, 200},  {0.99, 400}, {1.0, 400}};
  for (auto [p, want] : levels) {
    if (policy::noise_level(p) != want) return {false, fmt("noise_level(%g) wrong", p)};
  }
  // Every bin edge, approached from both sides.
  const double edges[] = {0.2, 0.4, 0.6, 0.8};
  for (int b = 1; b < 5; ++b) {
    const double edge = edges[b - 1];
    if (policy::noise_level(edge) != 100 * b) return {false, fmt("edge %g", edge)};
    if (policy::noise_level(std::nextafter(edge, 0.0)) != 100 * (b - 1)) return {false, fmt("below %g", edge)};
  }
  const int want_g[] = {8, 6, 4, 2};
  for (int s = 1; s <= 4; ++s) {
    if (policy::guidance_scale(policy::ComplexityScore(s, policy::ScoreSource::kManual)) != want_g[s - 1]) {
      return {false, fmt("guidance_scale(%g) wrong", s)};
    }
  }
  return {true, "6 levels, 8 edges, 4 scales exact"};
}

Outcome perturbation_moments() {
  const policy::NoiseSchedule schedule;
  std::mt19937_64 rng(1);
  const auto c = random_vector(16, rng);
  const double c2 = math::dot(c.span(), c.span());
  if (!(policy::perturb_embedding(c, 0, schedule, rng) == c)) return {false, "level 0 is not the identity"};
  double worst = 0;
  for (int level : {100, 400}) {
    double sum = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      const auto p = policy::perturb_embedding(c, level, schedule, rng);
      sum += math::dot(p.span(), p.span());
    }
    const double ab = schedule.alpha_bar(level);
    const double expected = ab * c2 + (1 - ab) * double(c.dim());
    worst = std::max(worst, std::abs(sum / n - expected) / expected);
  }
  return {worst < 0.02, fmt("max relative deviation %.3e (limit 2e-2)", worst)};
}

Outcome cfg_affine() {
  std::mt19937_64 rng(2);
  double residual = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto eu = random_vector(32, rng), ec = random_vector(32, rng);
    const auto f0 = gen::cfg_noise_estimate(eu, ec, 0.0);
    const auto f1 = gen::cfg_noise_estimate(eu, ec, 1.0);
    if (!(f0 == eu)) return {false, "does not collapse to eps_u at g = 0"};
    for (std::size_t i = 0; i < 32; ++i) {
      if (std::abs(f1[i] - ec[i]) >= 1e-12) return {false, "does not collapse to eps_c at g = 1"};
    }
    for (double g : {2.0, 4.0, 6.0, 8.0, -1.5, 7.25}) {
      const auto fg = gen::cfg_noise_estimate(eu, ec, g);
      for (std::size_t i = 0; i < 32; ++i) {
        residual = std::max(residual, std::abs(fg[i] - ((1 - g) * f0[i] + g * f1[i])));
      }
    }
  }
  return {residual < 1e-12, fmt("max affine residual %.2e (limit 1e-12)", residual)};
}

Outcome pca_oracle() {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 1.0;
  for (int inst = 0; inst < 50; ++inst) {
    // Anisotropic Gaussian with a random rotation and random per-axis scales.
    const std::size_t k = 64, n = 256;
    Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(Eigen::MatrixXd::NullaryExpr(
                                                                   k, k, [&] { return u(rng); }))
                            .householderQ();
    Eigen::VectorXd scales(k);
    for (std::size_t j = 0; j < k; ++j) scales[j] = std::exp(2.0 * u(rng));
    Eigen::VectorXd shift = Eigen::VectorXd::NullaryExpr(k, [&] { return u(rng); });
    std::vector<math::Vector> samples;
    Eigen::MatrixXd x(n, k);
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::VectorXd z(k);
      for (std::size_t j = 0; j < k; ++j) z[j] = g(rng) * scales[j];
      const Eigen::VectorXd row = q * z + shift;
      x.row(i) = row.transpose();
      samples.emplace_back(std::vector<double>(row.data(), row.data() + k));
    }
    const Eigen::MatrixXd centred = x.rowwise() - x.colwise().mean();
    const Eigen::MatrixXd cov = centred.transpose() * centred / double(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const Eigen::VectorXd lead = es.eigenvectors().col(k - 1);
    const auto pc = math::principal_component(samples);
    double c = 0;
    for (std::size_t j = 0; j < k; ++j) c += pc.direction[j] * lead[j];
    worst = std::min(worst, std::abs(c));
  }
  return {worst >= 0.999, fmt("min |cos| %.6f over 50 instances (limit 0.999)", worst)};
}

Outcome gradient_suite() {
  const auto rows = losses::gradient_suite(4, 100, 1e-5, 1e-5);
  bool ok = rows.size() == 5;
  std::string detail;
  for (const auto& r : rows) {
    ok = ok && r.passed && r.instances == 100;
    detail += r.loss + "=" + fmt("%.1e", r.max_rel_error) + " ";
  }
  return {ok, detail + "(limit 1e-5)"};
}

math::Matrix uniform_scores(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  math::Matrix m(32, 32);
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 0; j < 32; ++j) m(i, j) = u(rng);
  return m;
}

// Cosine similarities between unit feature rows and unit prototypes, the
// shape of scores the swapped-prediction loss feeds in.
math::Matrix cosine_scores(std::mt19937_64& rng, std::size_t d) {
  std::vector<math::Vector> a, b;
  for (int i = 0; i < 32; ++i) {
    a.push_back(math::normalized(random_vector(d, rng)));
    b.push_back(math::normalized(random_vector(d, rng)));
  }
  math::Matrix m(32, 32);
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 0; j < 32; ++j) m(i, j) = math::dot(a[i].span(), b[j].span());
  return m;
}

Outcome sinkhorn() {
  std::mt19937_64 rng(5);
  double worst_uniform = 0, worst_cosine = 0;
  int max_iters = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = losses::sinkhorn_knopp(uniform_scores(rng), 0.1, 50);
    const auto b = losses::sinkhorn_knopp(cosine_scores(rng, 128), 0.05, 50);
    worst_uniform = std::max(worst_uniform, losses::marginal_error(a));
    worst_cosine = std::max(worst_cosine, losses::marginal_error(b));
    max_iters = std::max({max_iters, a.iterations, b.iterations});
  }
  const bool ok = worst_uniform < 1e-6 && worst_cosine < 1e-6 && max_iters <= 50;
  return {ok, fmt("uniform eps=0.1 %.1e, cosine eps=0.05 %.1e, iters %g (limit 1e-6)", worst_uniform,
                  worst_cosine, max_iters)};
}

Outcome weight_normalization() {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g(0.0, 2.0);
  double sum_err = 0, shift_err = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> q(1 + trial % 64);
    for (auto& x : q) x = g(rng);
    const auto w = quality::normalize_weights(q);
    double s = 0;
    for (double x : w) s += x;
    sum_err = std::max(sum_err, std::abs(s - 1.0));
    for (double shift : {-50.0, 3.7, 1000.0}) {
      std::vector<double> qs = q;
      for (auto& x : qs) x += shift;
      const auto ws = quality::normalize_weights(qs);
      for (std::size_t i = 0; i < w.size(); ++i) shift_err = std::max(shift_err, std::abs(ws[i] - w[i]));
    }
    for (std::size_t i = 0; i < q.size(); ++i)
      for (std::size_t j = 0; j < q.size(); ++j)
        if (q[i] < q[j] && !(w[i] < w[j])) return {false, "order not preserved"};
  }
  const bool ok = sum_err < 1e-9 && shift_err < 1e-9;
  return {ok, fmt("sum error %.1e, shift error %.1e, order strict", sum_err, shift_err)};
}

Outcome quality_discrimination() {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto b = fixture::make_quality_batch(1000 + seed);
    if (b.mean_clean > b.mean_corrupted) ++wins;
  }
  return {wins >= 95, fmt("clean > corrupted in %g of 100 batches (need 95)", wins)};
}

double probe_after_training(double rho, bool quality_weights, std::uint64_t seed) {
  trainer::DatasetConfig dc;
  dc.corruption_rate = rho;
  dc.seed = seed;
  const auto ds = trainer::make_synthetic_dataset(dc);
  trainer::TrainConfig tc;
  tc.use_quality_weights = quality_weights;
  tc.seed = seed;
  const auto result = trainer::train(ds, tc);
  trainer::ProbeConfig pc;
  pc.seed = seed;
  return trainer::linear_probe(result.image_encoder, ds, pc);
}

Outcome end_to_end() {
  double gap_noisy = 0, gap_clean = 0;
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    gap_noisy += probe_after_training(0.3, true, s) - probe_after_training(0.3, false, s);
    gap_clean += probe_after_training(0.0, true, s) - probe_after_training(0.0, false, s);
  }
  gap_noisy = 100 * gap_noisy / seeds;
  gap_clean = 100 * gap_clean / seeds;
  const bool ok = gap_noisy >= 3.0 && std::abs(gap_clean) <= 2.0;
  return {ok, fmt("rho=0.3 gap %+.2f pts (need >= 3), rho=0 gap %+.2f pts (need |.| <= 2)", gap_noisy,
                  gap_clean)};
}

struct ScratchDir {
  std::filesystem::path path;
  ScratchDir() {
    path = std::filesystem::temp_directory_path() /
           ("genview_accept_" + std::to_string(Clock::now().time_since_epoch().count()));
    std::filesystem::create_directories(path);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

Outcome orchestrator() {
  ScratchDir dir;
  auto world = fixture::make_batch_world(20, 7);
  const gen::BlobStore store(dir.path / "blobs");
  fixture::FaultInjectingBackend backend;
  const auto bad = gen::plan_generation(world.samples[3], policy::Mode::kITC, world.context());
  backend.rejected = {bad.params.seed};
  const auto flaky = gen::plan_generation(world.samples[6], policy::Mode::kTC, world.context());
  backend.flaky = {flaky.params.seed};
  backend.transport_failures = 2;
  gen::BatchOptions opts;
  opts.retry = fixture::no_sleep_retry();
  const auto path = dir.path / "m.jsonl";

  const auto r1 = gen::batch_generate(path, world.samples, backend, store, world.context(), opts);
  if (r1.stats.failed != 1) return {false, "expected exactly one failed record"};
  std::size_t retries = 0;
  for (int run = 0; run < 3; ++run) {
    const auto before = backend.calls.load();
    const auto r = gen::batch_generate(path, world.samples, backend, store, world.context(), opts);
    if (r.stats.tasks != 1 || backend.calls.load() - before != 1) return {false, "failed record not retried once"};
    ++retries;
  }
  backend.heal();
  const auto r_heal = gen::batch_generate(path, world.samples, backend, store, world.context(), opts);
  if (r_heal.stats.done != 1) return {false, "healed record did not complete"};

  const auto bytes = fixture::slurp(path);
  const auto calls = backend.calls.load();
  const auto r_again = gen::batch_generate(path, world.samples, backend, store, world.context(), opts);
  const bool ok = r_again.stats.tasks == 0 && backend.calls.load() == calls && fixture::slurp(path) == bytes;
  return {ok, fmt("%g records, %g single retries, re-run: 0 calls, manifest byte-identical",
                  double(r1.stats.done + r1.stats.failed + r1.stats.skipped), double(retries))};
}

Outcome complexity_parser() {
  std::size_t cases = 0;
  for (int k = 1; k <= 4; ++k) {
    const std::string d = std::to_string(k);
    for (const std::string& raw :
         {"[score: " + d + "]", "[Score:" + d + "]", "  [SCORE :  " + d + " ]\n", "The caption is busy. [score: " + d + "]",
          "[sCoRe:\t" + d + "]."}) {
      if (policy::parse_score_reply(raw) != k) return {false, "failed on '" + raw + "'"};
      ++cases;
    }
  }
  for (const char* bad : {"[score: 5]", "[score: 0]", "score 3", ""}) {
    try {
      policy::parse_score_reply(bad);
      return {false, std::string("accepted '") + bad + "'"};
    } catch (const ParseError&) {
    }
  }
  policy::HeuristicComplexityScorer scorer(policy::load_lexicon(policy::default_lexicon_path()));
  std::ifstream in(std::string(GENVIEW_FIXTURE_DIR) + "/lexicon_golden.json");
  const auto golden = nlohmann::json::parse(in);
  std::size_t golden_cases = 0;
  for (const auto& c : golden.at("cases")) {
    const auto m = scorer.match(c.at("caption").get<std::string>());
    if (m.terms != c.at("terms").get<std::vector<std::string>>()) return {false, "terms differ: " + c.dump()};
    if (scorer.score(c.at("caption").get<std::string>()).value() != c.at("score").get<int>()) {
      return {false, "score differs: " + c.dump()};
    }
    ++golden_cases;
  }
  return {true, fmt("%g reply variants, %g golden captions exact", double(cases), double(golden_cases))};
}

}  // namespace

int main() {
  criterion("policy_exactness", 1.0, policy_exactness);
  criterion("perturbation_moments", 10.0, perturbation_moments);
  criterion("cfg_affine", 0, cfg_affine);
  criterion("pca_oracle", 0, pca_oracle);
  criterion("gradient_suite", 30.0, gradient_suite);
  criterion("sinkhorn_marginals", 0, sinkhorn);
  criterion("weight_normalization", 0, weight_normalization);
  criterion("quality_discrimination", 0, quality_discrimination);
  criterion("end_to_end_probe_gap", 120.0, end_to_end);
  criterion("orchestrator_idempotence", 0, orchestrator);
  criterion("complexity_parser", 0, complexity_parser);
  std::printf("%d failed\n", failures);
  return failures == 0 ? 0 : 1;
}
