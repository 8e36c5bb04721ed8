#include "genview/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "genview/backend.hpp"
#include "genview/batch.hpp"
#include "genview/blob_store.hpp"
#include "genview/error.hpp"
#include "genview/feature_io.hpp"
#include "genview/generation.hpp"
#include "genview/losses.hpp"
#include "genview/policy.hpp"
#include "genview/quality.hpp"
#include "genview/saliency.hpp"
#include "genview/trainer.hpp"

namespace genview::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Bad flag values or combinations discovered after parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LogLevel { kError, kWarn, kInfo, kDebug };

LogLevel parse_log_level(const std::string& s) {
  if (s == "error") return LogLevel::kError;
  if (s == "warn") return LogLevel::kWarn;
  if (s == "info") return LogLevel::kInfo;
  if (s == "debug") return LogLevel::kDebug;
  throw UsageError("--log-level must be one of error, warn, info, debug");
}

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool json_output = false;
  std::string config_path;
  std::string log_level = "warn";
  json config = json::object();
};

struct Context {
  std::ostream& out;
  std::ostream& err;
  Globals g;
  LogLevel level = LogLevel::kWarn;

  void log(LogLevel at, const std::string& msg) const {
    if (at <= level) err << msg << "\n";
  }
  const json& section(const char* name) const {
    static const json kEmpty = json::object();
    const auto it = g.config.find(name);
    if (it == g.config.end()) return kEmpty;
    if (!it->is_object()) throw UsageError(std::string("config section '") + name + "' must be an object");
    return *it;
  }
};

// Fills `value` from the config section when the flag was not given.
template <typename T>
void merge(const json& section, const char* key, const CLI::Option* opt, T& value) {
  if (opt->count() > 0 || !section.contains(key)) return;
  try {
    value = section.at(key).get<T>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("config key '") + key + "': " + e.what());
  }
}

void require(bool present, const char* flag) {
  if (!present) throw UsageError(std::string(flag) + " is required");
}

std::string fmt(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
  return buf;
}

void print_table(std::ostream& out, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()), 0);
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t c = 0; c < r.size(); ++c) {
      line += r[c];
      if (c + 1 < r.size()) line += std::string(width[c] - r[c].size() + 2, ' ');
    }
    out << line << "\n";
  }
}

json read_json_file(const fs::path& path) {
  const std::string text = io::read_text(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), text);
  }
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::istringstream in(io::read_text(path));
  std::vector<json> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what(), line);
    }
  }
  return rows;
}

math::DenseFeatureMap load_map(const fs::path& path) {
  if (path.extension() == ".json") return io::feature_map_from_json(read_json_file(path));
  return io::read_feature_map(path);
}

std::vector<fs::path> expand_feature_paths(const std::vector<std::string>& items) {
  std::vector<fs::path> out;
  for (const auto& item : items) {
    const fs::path p(item);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p)) {
        const auto ext = e.path().extension();
        if (e.is_regular_file() && (ext == ".gvfm" || ext == ".json")) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else if (fs::exists(p)) {
      out.push_back(p);
    } else {
      throw IoError("no such feature file or directory: " + item);
    }
  }
  if (out.empty()) throw InvalidArgument("no feature maps found");
  return out;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

// A vector given inline as a JSON array or as a path to a stored vector.
math::Vector load_vector_field(const json& v, const fs::path& base) {
  if (v.is_array()) return math::Vector(v.get<std::vector<double>>());
  if (v.is_string()) {
    const auto path = resolve(base, v.get<std::string>());
    if (path.extension() == ".json") return math::Vector(read_json_file(path).get<std::vector<double>>());
    return math::Vector(load_map(path).data());
  }
  throw InvalidArgument("vector field must be an array of numbers or a file path");
}

std::vector<policy::Mode> parse_modes(const std::vector<std::string>& names) {
  std::vector<policy::Mode> modes;
  for (const auto& n : names) {
    const auto m = policy::mode_from_string(n);
    if (std::find(modes.begin(), modes.end(), m) != modes.end()) {
      throw UsageError("--modes lists '" + n + "' twice");
    }
    modes.push_back(m);
  }
  if (modes.empty()) throw UsageError("--modes is empty");
  return modes;
}

std::vector<gen::SampleInput> load_samples(const fs::path& inputs, const std::string& features_dir) {
  const fs::path base = features_dir.empty() ? inputs.parent_path() : fs::path(features_dir);
  std::vector<gen::SampleInput> samples;
  std::vector<std::string> seen;
  for (const auto& row : read_jsonl(inputs)) {
    try {
      gen::SampleInput s;
      s.sample_id = row.at("sample_id").get<std::string>();
      if (std::find(seen.begin(), seen.end(), s.sample_id) != seen.end()) {
        throw InvalidArgument("duplicate sample_id '" + s.sample_id + "' in " + inputs.string());
      }
      seen.push_back(s.sample_id);
      if (row.contains("features")) s.features = load_map(resolve(base, row.at("features").get<std::string>()));
      if (row.contains("caption")) s.caption = row.at("caption").get<std::string>();
      if (row.contains("image_embedding")) s.image_embedding = load_vector_field(row.at("image_embedding"), base);
      samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw ParseError(inputs.string() + ": bad sample record: " + e.what(), row.dump());
    }
  }
  return samples;
}

// Everything plan/generate need to turn samples into requests.
struct PolicySetup {
  std::optional<saliency::ForegroundDirection> direction;
  policy::NoiseSchedule schedule;
  std::unique_ptr<policy::ScorerTransport> transport;
  std::unique_ptr<policy::ComplexityScorer> scorer;

  gen::PolicyContext context(std::uint64_t seed) {
    return {direction ? &*direction : nullptr, &schedule, scorer.get(), seed};
  }
};

std::unique_ptr<policy::ComplexityScorer> make_scorer(const std::string& scorer, const std::string& lexicon,
                                                      std::unique_ptr<policy::ScorerTransport>& transport) {
  if (scorer == "heuristic") {
    return std::make_unique<policy::HeuristicComplexityScorer>(
        policy::load_lexicon(lexicon.empty() ? policy::default_lexicon_path() : lexicon));
  }
  if (scorer.rfind("http://", 0) == 0 || scorer.rfind("https://", 0) == 0) {
    transport = std::make_unique<gen::HttpScorerTransport>(scorer);
    return std::make_unique<policy::LlmComplexityScorer>(*transport);
  }
  throw UsageError("--scorer must be 'heuristic' or an http(s) URL");
}

PolicySetup make_policy(const std::vector<policy::Mode>& modes, const std::string& direction,
                        const std::string& scorer, const std::string& lexicon) {
  PolicySetup p;
  const bool needs_dir = std::any_of(modes.begin(), modes.end(), [](policy::Mode m) { return m != policy::Mode::kTC; });
  const bool needs_scorer = std::any_of(modes.begin(), modes.end(), [](policy::Mode m) { return m != policy::Mode::kIC; });
  if (needs_dir) {
    require(!direction.empty(), "--direction (needed by ic/itc)");
    p.direction = saliency::load_direction(direction);
    if (!p.direction->alpha) {
      throw InvalidArgument(direction + ": direction has no calibrated alpha; run `saliency fit` to produce one");
    }
  }
  if (needs_scorer) p.scorer = make_scorer(scorer, lexicon, p.transport);
  return p;
}

json probe_from_config(const json& section, trainer::ProbeConfig& pc) {
  try {
    pc.train_fraction = section.value("train_fraction", pc.train_fraction);
    pc.iterations = section.value("iterations", pc.iterations);
    pc.lr = section.value("lr", pc.lr);
    pc.seed = section.value("seed", pc.seed);
    pc.shuffle_labels = section.value("shuffle_labels", pc.shuffle_labels);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config section 'probe': ") + e.what());
  }
  return {{"train_fraction", pc.train_fraction},
          {"iterations", pc.iterations},
          {"lr", pc.lr},
          {"seed", pc.seed},
          {"shuffle_labels", pc.shuffle_labels}};
}

// ---------------------------------------------------------------------------

struct SaliencyFitArgs {
  std::vector<std::string> features;
  std::string out;
  std::size_t max_tokens = 100000;
  double target = 0.4;
  CLI::Option *o_features, *o_out, *o_max_tokens, *o_target;
};

int run_saliency_fit(Context& ctx, SaliencyFitArgs& a) {
  const auto& sec = ctx.section("saliency_fit");
  merge(sec, "features", a.o_features, a.features);
  merge(sec, "out", a.o_out, a.out);
  merge(sec, "max_tokens", a.o_max_tokens, a.max_tokens);
  merge(sec, "target_fraction", a.o_target, a.target);
  require(!a.features.empty(), "--features");
  require(!a.out.empty(), "--out");
  if (!(a.target > 0.0 && a.target < 1.0)) throw UsageError("--target-fraction must lie in (0, 1)");

  std::vector<math::DenseFeatureMap> maps;
  for (const auto& p : expand_feature_paths(a.features)) maps.push_back(load_map(p));
  ctx.log(LogLevel::kInfo, "loaded " + std::to_string(maps.size()) + " feature maps");

  saliency::FitOptions fo;
  fo.max_tokens = a.max_tokens;
  fo.seed = ctx.g.seed;
  auto dir = saliency::fit_foreground_direction(maps, fo);
  std::vector<math::ScalarMap> normalized;
  for (const auto& m : maps) normalized.push_back(math::min_max_normalize(saliency::activation_map(m, dir)));
  dir.alpha = saliency::calibrate_threshold(normalized, a.target);
  saliency::save_direction(a.out, dir);

  if (ctx.g.json_output) {
    ctx.out << json{{"out", a.out}, {"k", dir.k()}, {"maps", maps.size()},
                    {"sample_count", dir.source_sample_count}, {"alpha", *dir.alpha}}.dump() << "\n";
  } else {
    ctx.out << "direction k=" << dir.k() << " from " << maps.size() << " maps (" << dir.source_sample_count
            << " tokens), alpha=" << fmt(*dir.alpha) << " -> " << a.out << "\n";
  }
  return kExitOk;
}

struct SaliencyScoreArgs {
  std::vector<std::string> features;
  std::string direction;
  CLI::Option *o_features, *o_direction;
};

int run_saliency_score(Context& ctx, SaliencyScoreArgs& a) {
  const auto& sec = ctx.section("saliency_score");
  merge(sec, "features", a.o_features, a.features);
  merge(sec, "direction", a.o_direction, a.direction);
  require(!a.features.empty(), "--features");
  require(!a.direction.empty(), "--direction");
  const auto dir = saliency::load_direction(a.direction);
  if (!dir.alpha) throw InvalidArgument(a.direction + ": direction has no calibrated alpha");

  json rows = json::array();
  std::vector<std::vector<std::string>> table{{"file", "foreground_proportion", "noise_level"}};
  for (const auto& p : expand_feature_paths(a.features)) {
    const auto res = saliency::analyze(load_map(p), dir);
    const int level = policy::noise_level(res.foreground_proportion);
    rows.push_back({{"file", p.string()}, {"foreground_proportion", res.foreground_proportion}, {"noise_level", level}});
    table.push_back({p.string(), fmt(res.foreground_proportion), std::to_string(level)});
  }
  if (ctx.g.json_output) {
    ctx.out << rows.dump() << "\n";
  } else {
    print_table(ctx.out, table);
  }
  return kExitOk;
}

struct PlanArgs {
  std::string inputs, features_dir, direction, scorer = "heuristic", lexicon, out;
  std::vector<std::string> modes = {"ic", "tc", "itc"};
  CLI::Option *o_inputs, *o_features_dir, *o_direction, *o_scorer, *o_lexicon, *o_out, *o_modes;
};

int run_plan(Context& ctx, PlanArgs& a) {
  const auto& sec = ctx.section("plan");
  merge(sec, "inputs", a.o_inputs, a.inputs);
  merge(sec, "features_dir", a.o_features_dir, a.features_dir);
  merge(sec, "direction", a.o_direction, a.direction);
  merge(sec, "scorer", a.o_scorer, a.scorer);
  merge(sec, "lexicon", a.o_lexicon, a.lexicon);
  merge(sec, "out", a.o_out, a.out);
  merge(sec, "modes", a.o_modes, a.modes);
  require(!a.inputs.empty(), "--inputs");
  const auto modes = parse_modes(a.modes);
  const auto samples = load_samples(a.inputs, a.features_dir);
  auto setup = make_policy(modes, a.direction, a.scorer, a.lexicon);
  const auto pctx = setup.context(ctx.g.seed);

  json rows = json::array();
  std::vector<std::vector<std::string>> table{{"sample_id", "mode", "noise_level", "guidance_scale", "cache_key"}};
  std::string lines;
  for (const auto& s : samples) {
    for (auto mode : modes) {
      json row;
      if (!gen::has_inputs_for(s, mode)) {
        row = {{"sample_id", s.sample_id}, {"mode", policy::to_string(mode)}, {"status", "skipped"}};
        table.push_back({s.sample_id, policy::to_string(mode), "-", "-", "skipped"});
      } else {
        const auto req = gen::plan_generation(s, mode, pctx);
        row = gen::to_json(req);
        const auto& p = req.params;
        table.push_back({s.sample_id, policy::to_string(mode),
                         p.noise_level ? std::to_string(*p.noise_level) : "-",
                         p.guidance_scale ? std::to_string(*p.guidance_scale) : "-", req.cache_key.substr(0, 12)});
      }
      lines += row.dump() + "\n";
      rows.push_back(std::move(row));
    }
  }
  if (!a.out.empty()) io::write_text(a.out, lines);
  if (ctx.g.json_output) {
    ctx.out << rows.dump() << "\n";
  } else {
    print_table(ctx.out, table);
  }
  return kExitOk;
}

struct GenerateArgs {
  std::string inputs, features_dir, direction, scorer = "heuristic", lexicon, manifest, backend = "toy",
      blob_dir, views_out;
  std::vector<std::string> modes = {"ic", "tc", "itc"};
  std::size_t max_in_flight = 4;
  CLI::Option *o_inputs, *o_features_dir, *o_direction, *o_scorer, *o_lexicon, *o_manifest, *o_backend,
      *o_blob_dir, *o_views_out, *o_modes, *o_max_in_flight;
};

int run_generate(Context& ctx, GenerateArgs& a) {
  const auto& sec = ctx.section("generate");
  merge(sec, "inputs", a.o_inputs, a.inputs);
  merge(sec, "features_dir", a.o_features_dir, a.features_dir);
  merge(sec, "direction", a.o_direction, a.direction);
  merge(sec, "scorer", a.o_scorer, a.scorer);
  merge(sec, "lexicon", a.o_lexicon, a.lexicon);
  merge(sec, "manifest", a.o_manifest, a.manifest);
  merge(sec, "backend", a.o_backend, a.backend);
  merge(sec, "views_out", a.o_views_out, a.views_out);
  merge(sec, "modes", a.o_modes, a.modes);
  merge(sec, "max_in_flight", a.o_max_in_flight, a.max_in_flight);
  require(!a.inputs.empty(), "--inputs");
  require(!a.manifest.empty(), "--manifest");
  if (a.max_in_flight < 1) throw UsageError("--max-in-flight must be >= 1");

  // --blob-dir, then GENVIEW_BLOB_DIR, then the config, then <manifest dir>/blobs.
  fs::path blob_root;
  if (a.o_blob_dir->count() > 0) {
    blob_root = a.blob_dir;
  } else {
    fs::path fallback = fs::path(a.manifest).parent_path() / "blobs";
    if (sec.contains("blob_dir")) fallback = sec.at("blob_dir").get<std::string>();
    else if (ctx.g.config.contains("blob_dir")) fallback = ctx.g.config.at("blob_dir").get<std::string>();
    blob_root = gen::BlobStore::resolve_root(fallback);
  }

  gen::BatchOptions opts;
  opts.modes = parse_modes(a.modes);
  opts.max_in_flight = a.max_in_flight;
  const auto samples = load_samples(a.inputs, a.features_dir);
  auto setup = make_policy(opts.modes, a.direction, a.scorer, a.lexicon);
  auto backend = gen::make_backend(a.backend);
  const gen::BlobStore store(blob_root);
  ctx.log(LogLevel::kInfo, "blob store at " + blob_root.string());

  const auto result = gen::batch_generate(a.manifest, samples, *backend, store, setup.context(ctx.g.seed), opts);
  if (!a.views_out.empty()) {
    std::string lines;
    for (const auto& v : result.view_sets) lines += gen::to_json(v).dump() + "\n";
    io::write_text(a.views_out, lines);
  }
  const auto& st = result.stats;
  if (ctx.g.json_output) {
    ctx.out << json{{"new", st.new_records()},          {"done", st.done},
                    {"failed", st.failed},               {"skipped", st.skipped},
                    {"backend_calls", st.backend_calls}, {"cache_hits", st.cache_hits},
                    {"max_concurrent_calls", st.max_concurrent_calls}}
                   .dump()
            << "\n";
  } else {
    ctx.out << st.new_records() << " new (done " << st.done << ", failed " << st.failed << ", skipped "
            << st.skipped << "); backend calls " << st.backend_calls << "; cache hits " << st.cache_hits
            << "\n";
  }
  return kExitOk;
}

struct ScoreArgs {
  std::string pairs, features_dir, direction, out, caption, scorer = "heuristic", lexicon;
  bool per_map = false;
  std::size_t grid = 7;
  std::size_t threads = 1;
  CLI::Option *o_pairs, *o_features_dir, *o_direction, *o_out, *o_caption, *o_scorer, *o_lexicon, *o_per_map,
      *o_grid, *o_threads;
};

int run_score_caption(Context& ctx, ScoreArgs& a) {
  std::unique_ptr<policy::ScorerTransport> transport;
  auto scorer = make_scorer(a.scorer, a.lexicon, transport);
  const auto score = policy::score_caption_complexity(a.caption, *scorer);
  const int g = policy::guidance_scale(score);
  std::vector<std::string> terms;
  if (const auto* h = dynamic_cast<policy::HeuristicComplexityScorer*>(scorer.get())) terms = h->match(a.caption).terms;
  if (ctx.g.json_output) {
    json j = {{"caption", a.caption}, {"score", score.value()}, {"guidance_scale", g}};
    if (transport == nullptr) j["terms"] = terms;
    ctx.out << j.dump() << "\n";
  } else {
    std::string joined;
    for (const auto& t : terms) joined += (joined.empty() ? "" : ", ") + t;
    ctx.out << "score " << score.value() << " -> guidance_scale " << g;
    if (transport == nullptr) ctx.out << " [" << joined << "]";
    ctx.out << "\n";
  }
  return kExitOk;
}

int run_score(Context& ctx, ScoreArgs& a) {
  const auto& sec = ctx.section("score");
  merge(sec, "pairs", a.o_pairs, a.pairs);
  merge(sec, "features_dir", a.o_features_dir, a.features_dir);
  merge(sec, "direction", a.o_direction, a.direction);
  merge(sec, "out", a.o_out, a.out);
  merge(sec, "scorer", a.o_scorer, a.scorer);
  merge(sec, "lexicon", a.o_lexicon, a.lexicon);
  merge(sec, "per_map", a.o_per_map, a.per_map);
  merge(sec, "grid", a.o_grid, a.grid);
  merge(sec, "threads", a.o_threads, a.threads);
  if (a.o_caption->count() > 0) {
    if (a.o_pairs->count() > 0) throw UsageError("--caption and --pairs are exclusive");
    return run_score_caption(ctx, a);
  }
  require(!a.pairs.empty(), "--pairs (or --caption)");
  require(!a.direction.empty(), "--direction");
  const auto dir = saliency::load_direction(a.direction);
  const fs::path base = a.features_dir.empty() ? fs::path(a.pairs).parent_path() : fs::path(a.features_dir);

  std::deque<math::DenseFeatureMap> maps;  // stable addresses
  std::deque<math::Vector> texts;
  std::vector<quality::ImagePair> image_pairs;
  std::vector<quality::ImageTextPair> text_pairs;
  for (const auto& row : read_jsonl(a.pairs)) {
    try {
      const auto id = row.at("pair_id").get<std::string>();
      if (row.contains("first")) {
        maps.push_back(load_map(resolve(base, row.at("first").get<std::string>())));
        const auto* first = &maps.back();
        maps.push_back(load_map(resolve(base, row.at("second").get<std::string>())));
        image_pairs.push_back({id, first, &maps.back()});
      } else {
        maps.push_back(load_map(resolve(base, row.at("raw").get<std::string>())));
        const auto* raw = &maps.back();
        maps.push_back(load_map(resolve(base, row.at("view").get<std::string>())));
        const auto* view = &maps.back();
        texts.push_back(load_vector_field(row.at("text"), base));
        text_pairs.push_back({id, raw, view, &texts.back()});
      }
    } catch (const json::exception& e) {
      throw ParseError(a.pairs + ": bad pair record: " + e.what(), row.dump());
    }
  }
  if (!image_pairs.empty() && !text_pairs.empty()) {
    throw InvalidArgument(a.pairs + ": mixes image-image and image-text pairs; score them separately");
  }
  if (image_pairs.empty() && text_pairs.empty()) throw InvalidArgument(a.pairs + ": no pairs");

  quality::AssessorOptions opts;
  opts.direction_mode = a.per_map ? quality::DirectionMode::kPerMap : quality::DirectionMode::kShared;
  opts.grid = a.grid;
  const auto batch = image_pairs.empty()
                         ? quality::score_image_text_pairs(text_pairs, dir, opts, a.threads)
                         : quality::score_image_pairs(image_pairs, dir, opts, a.threads);

  json rows = json::array();
  std::string lines;
  std::vector<std::vector<std::string>> table{{"pair_id", "s_primary", "s_background", "q", "weight"}};
  for (const auto& e : batch.entries) {
    json r = {{"pair_id", e.pair_id},
              {"s_primary", e.quality.s_primary},
              {"s_background", e.quality.s_background},
              {"q", e.quality.q},
              {"weight", e.weight}};
    if (e.degenerate) {
      r["degenerate"] = true;
      ctx.log(LogLevel::kWarn, "pair " + e.pair_id + ": degenerate features, q set to the batch minimum");
    }
    lines += r.dump() + "\n";
    table.push_back({e.pair_id, fmt(e.quality.s_primary), fmt(e.quality.s_background), fmt(e.quality.q),
                     fmt(e.weight)});
    rows.push_back(std::move(r));
  }
  if (!a.out.empty()) io::write_text(a.out, lines);
  if (ctx.g.json_output) {
    ctx.out << rows.dump() << "\n";
  } else {
    print_table(ctx.out, table);
  }
  return kExitOk;
}

struct LossCheckArgs {
  std::size_t instances = 100;
  double h = 1e-5;
  double tolerance = 1e-5;
  CLI::Option *o_instances, *o_h, *o_tolerance;
};

int run_loss_check(Context& ctx, LossCheckArgs& a) {
  const auto& sec = ctx.section("loss_check");
  merge(sec, "instances", a.o_instances, a.instances);
  merge(sec, "step", a.o_h, a.h);
  merge(sec, "tolerance", a.o_tolerance, a.tolerance);
  if (a.instances < 1 || !(a.h > 0.0) || !(a.tolerance > 0.0)) {
    throw UsageError("--instances, --step and --tolerance must be positive");
  }
  const auto rows = losses::gradient_suite(ctx.g.seed, a.instances, a.h, a.tolerance);
  const bool ok = std::all_of(rows.begin(), rows.end(), [](const auto& r) { return r.passed; });
  if (ctx.g.json_output) {
    json j = {{"passed", ok}, {"h", a.h}, {"tolerance", a.tolerance}, {"losses", json::array()}};
    for (const auto& r : rows) {
      j["losses"].push_back(
          {{"loss", r.loss}, {"instances", r.instances}, {"max_rel_error", r.max_rel_error}, {"passed", r.passed}});
    }
    ctx.out << j.dump() << "\n";
  } else {
    std::vector<std::vector<std::string>> table{{"loss", "instances", "max_rel_error", "result"}};
    for (const auto& r : rows) {
      table.push_back({r.loss, std::to_string(r.instances), fmt(r.max_rel_error, 3), r.passed ? "PASS" : "FAIL"});
    }
    print_table(ctx.out, table);
  }
  return ok ? kExitOk : kExitDomainError;
}

struct TrainArgs {
  std::string out;
  int epochs = 0;
  std::string loss;
  double corruption = 0.0;
  double lr = 0.0;
  bool quality = false;
  bool uniform = false;
  CLI::Option *o_out, *o_epochs, *o_loss, *o_corruption, *o_lr, *o_quality, *o_uniform;
};

int run_train(Context& ctx, TrainArgs& a) {
  require(!a.out.empty(), "--out");
  const json& cfg = ctx.g.config;
  trainer::DatasetConfig dc;
  trainer::TrainConfig tc;
  trainer::ProbeConfig pc;
  json dataset_sec = ctx.section("dataset");
  json train_sec = ctx.section("train");
  json probe_sec = ctx.section("probe");
  // The global seed reaches every seeded component unless a section pins its own.
  std::optional<std::uint64_t> seed;
  if (ctx.g.seed_given) {
    seed = ctx.g.seed;
  } else if (cfg.contains("seed")) {
    seed = cfg.at("seed").get<std::uint64_t>();
  }
  if (seed) {
    for (json* s : {&dataset_sec, &train_sec, &probe_sec}) {
      if (ctx.g.seed_given || !s->contains("seed")) (*s)["seed"] = *seed;
    }
  }
  if (a.o_epochs->count() > 0) train_sec["epochs"] = a.epochs;
  if (a.o_loss->count() > 0) train_sec["loss"] = a.loss;
  if (a.o_lr->count() > 0) train_sec["lr"] = a.lr;
  if (a.o_quality->count() > 0 && a.o_uniform->count() > 0) throw UsageError("--quality and --uniform are exclusive");
  if (a.o_quality->count() > 0) train_sec["use_quality_weights"] = true;
  if (a.o_uniform->count() > 0) train_sec["use_quality_weights"] = false;
  if (a.o_corruption->count() > 0) dataset_sec["corruption_rate"] = a.corruption;

  dc = trainer::dataset_config_from_json(dataset_sec);
  tc = trainer::train_config_from_json(train_sec);
  const json probe_json = probe_from_config(probe_sec, pc);

  const fs::path out(a.out);
  fs::create_directories(out);
  io::write_text(out / "config.json",
                 json{{"dataset", trainer::to_json(dc)}, {"train", trainer::to_json(tc)}, {"probe", probe_json}}
                         .dump(2) +
                     "\n");
  const auto ds = trainer::make_synthetic_dataset(dc);
  ctx.log(LogLevel::kInfo, "dataset: " + std::to_string(ds.samples.size()) + " samples, " +
                               std::to_string(ds.corrupted_count()) + " corrupted");
  trainer::TrainResult result;
  try {
    result = trainer::train(ds, tc);
  } catch (const trainer::TrainingDiverged& e) {
    std::string metrics;
    for (const auto& m : e.trace()) metrics += trainer::to_json(m).dump() + "\n";
    io::write_text(out / "metrics.jsonl", metrics);
    throw;
  }
  const double acc = trainer::linear_probe(result.image_encoder, ds, pc);
  const auto summary = trainer::summarize(result, acc);
  trainer::write_run(out, result, ds, summary);

  if (ctx.g.json_output) {
    ctx.out << trainer::to_json(summary).dump() << "\n";
  } else {
    print_table(ctx.out, {{"probe_accuracy", fmt(summary.probe_accuracy)},
                          {"mean_clean_weight", fmt(summary.mean_clean_weight)},
                          {"mean_corrupted_weight", fmt(summary.mean_corrupted_weight)},
                          {"run_dir", out.string()}});
  }
  return kExitOk;
}

struct ProbeArgs {
  std::string run;
  double train_fraction = 0.6;
  int iterations = 200;
  double lr = 0.1;
  bool shuffle_labels = false;
  CLI::Option *o_run, *o_train_fraction, *o_iterations, *o_lr, *o_shuffle;
};

int run_probe(Context& ctx, ProbeArgs& a) {
  const auto& sec = ctx.section("probe");
  merge(sec, "run", a.o_run, a.run);
  merge(sec, "train_fraction", a.o_train_fraction, a.train_fraction);
  merge(sec, "iterations", a.o_iterations, a.iterations);
  merge(sec, "lr", a.o_lr, a.lr);
  merge(sec, "shuffle_labels", a.o_shuffle, a.shuffle_labels);
  require(!a.run.empty(), "--run");
  const fs::path dir(a.run);
  const auto emb = io::read_feature_map(dir / "embeddings.gvfm");
  const auto labels_json = read_json_file(dir / "labels.json");
  std::vector<int> labels;
  try {
    labels = labels_json.at("labels").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw ParseError((dir / "labels.json").string() + ": " + e.what(), labels_json.dump());
  }
  if (labels.size() != emb.tokens()) throw ShapeMismatch("probe: labels and embeddings differ in count");
  std::vector<math::Vector> features;
  for (std::size_t i = 0; i < emb.tokens(); ++i) {
    const auto t = emb.token(i);
    features.emplace_back(std::vector<double>(t.begin(), t.end()));
  }
  trainer::ProbeConfig pc;
  pc.train_fraction = a.train_fraction;
  pc.iterations = a.iterations;
  pc.lr = a.lr;
  pc.seed = ctx.g.seed;
  pc.shuffle_labels = a.shuffle_labels;
  const double acc = trainer::probe_embeddings(features, labels, pc);
  if (ctx.g.json_output) {
    ctx.out << json{{"probe_accuracy", acc}, {"samples", labels.size()}}.dump() << "\n";
  } else {
    ctx.out << "probe_accuracy " << fmt(acc) << " (" << labels.size() << " samples)\n";
  }
  return kExitOk;
}

struct ReportArgs {
  std::string run, csv;
  CLI::Option *o_run, *o_csv;
};

int run_report(Context& ctx, ReportArgs& a) {
  const auto& sec = ctx.section("report");
  merge(sec, "run", a.o_run, a.run);
  merge(sec, "csv", a.o_csv, a.csv);
  require(!a.run.empty(), "--run");
  const fs::path dir(a.run);
  const auto summary = read_json_file(dir / "summary.json");
  const auto metrics = read_jsonl(dir / "metrics.jsonl");
  if (!a.csv.empty()) {
    static const char* kColumns[] = {"epoch", "loss", "mean_clean_weight", "mean_corrupted_weight",
                                     "corrupted_below_uniform"};
    std::string csv = "epoch,loss,mean_clean_weight,mean_corrupted_weight,corrupted_below_uniform\n";
    for (const auto& m : metrics) {
      for (std::size_t c = 0; c < std::size(kColumns); ++c) {
        csv += (c ? "," : "") + m.at(kColumns[c]).dump();
      }
      csv += "\n";
    }
    io::write_text(a.csv, csv);
  }
  if (ctx.g.json_output) {
    ctx.out << json{{"summary", summary}, {"epochs", metrics.size()}}.dump() << "\n";
  } else {
    std::vector<std::vector<std::string>> table{{"field", "value"}};
    for (const auto& [k, v] : summary.items()) table.push_back({k, v.is_number() ? fmt(v.get<double>()) : v.dump()});
    table.push_back({"epochs", std::to_string(metrics.size())});
    print_table(ctx.out, table);
  }
  return kExitOk;
}

// Finds --config before full parsing so its values can seed defaults.
std::string prescan_config(int argc, const char* const* argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc) return argv[i + 1];
    if (arg.rfind("--config=", 0) == 0) return arg.substr(9);
  }
  return {};
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Context ctx{out, err, {}};
  CLI::App app{"Adaptive view generation and quality-driven contrastive training toolkit", "genview"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  auto* o_seed = app.add_option("--seed", ctx.g.seed, "Global seed for every seeded component");
  app.add_flag("--json", ctx.g.json_output, "Machine-readable JSON on stdout");
  app.add_option("--config", ctx.g.config_path, "JSON config file; flags win over its values");
  app.add_option("--log-level", ctx.g.log_level, "error, warn, info or debug (stderr)");

  auto* saliency_cmd = app.add_subcommand("saliency", "Fit or apply the foreground direction");
  saliency_cmd->require_subcommand(1);
  SaliencyFitArgs fit;
  auto* fit_cmd = saliency_cmd->add_subcommand("fit", "Fit the direction and threshold from feature maps");
  fit.o_features = fit_cmd->add_option("--features", fit.features, "Feature files or directories (.gvfm/.json)");
  fit.o_out = fit_cmd->add_option("--out", fit.out, "Direction JSON to write");
  fit.o_max_tokens = fit_cmd->add_option("--max-tokens", fit.max_tokens, "Token subsample size");
  fit.o_target = fit_cmd->add_option("--target-fraction", fit.target, "Calibrated foreground fraction");
  SaliencyScoreArgs sscore;
  auto* sscore_cmd = saliency_cmd->add_subcommand("score", "Foreground proportion and noise level per map");
  sscore.o_features = sscore_cmd->add_option("--features", sscore.features, "Feature files or directories");
  sscore.o_direction = sscore_cmd->add_option("--direction", sscore.direction, "Direction JSON");

  PlanArgs plan;
  auto* plan_cmd = app.add_subcommand("plan", "Plan generation requests without calling a backend");
  plan.o_inputs = plan_cmd->add_option("--inputs", plan.inputs, "Sample records (JSON lines)");
  plan.o_features_dir = plan_cmd->add_option("--features-dir", plan.features_dir, "Base for feature paths");
  plan.o_direction = plan_cmd->add_option("--direction", plan.direction, "Direction JSON (ic/itc)");
  plan.o_scorer = plan_cmd->add_option("--scorer", plan.scorer, "'heuristic' or an LLM scorer URL");
  plan.o_lexicon = plan_cmd->add_option("--lexicon", plan.lexicon, "Lexicon JSON for the heuristic scorer");
  plan.o_out = plan_cmd->add_option("--out", plan.out, "Write requests as JSON lines");
  plan.o_modes = plan_cmd->add_option("--modes", plan.modes, "Comma-separated ic,tc,itc")->delimiter(',');

  GenerateArgs gen_args;
  auto* gen_cmd = app.add_subcommand("generate", "Generate views and record them in the manifest");
  gen_args.o_inputs = gen_cmd->add_option("--inputs", gen_args.inputs, "Sample records (JSON lines)");
  gen_args.o_features_dir = gen_cmd->add_option("--features-dir", gen_args.features_dir, "Base for feature paths");
  gen_args.o_direction = gen_cmd->add_option("--direction", gen_args.direction, "Direction JSON (ic/itc)");
  gen_args.o_scorer = gen_cmd->add_option("--scorer", gen_args.scorer, "'heuristic' or an LLM scorer URL");
  gen_args.o_lexicon = gen_cmd->add_option("--lexicon", gen_args.lexicon, "Lexicon JSON");
  gen_args.o_manifest = gen_cmd->add_option("--manifest", gen_args.manifest, "Manifest (JSON lines), appended");
  gen_args.o_backend = gen_cmd->add_option("--backend", gen_args.backend, "mock, toy or an http(s) URL");
  gen_args.o_blob_dir = gen_cmd->add_option("--blob-dir", gen_args.blob_dir, "Blob store root");
  gen_args.o_views_out = gen_cmd->add_option("--views-out", gen_args.views_out, "Write positive view sets");
  gen_args.o_modes = gen_cmd->add_option("--modes", gen_args.modes, "Comma-separated ic,tc,itc")->delimiter(',');
  gen_args.o_max_in_flight = gen_cmd->add_option("--max-in-flight", gen_args.max_in_flight, "Concurrent calls");

  ScoreArgs score;
  auto* score_cmd = app.add_subcommand("score", "Pair quality weights, or caption complexity");
  score.o_pairs = score_cmd->add_option("--pairs", score.pairs, "Pair records (JSON lines)");
  score.o_features_dir = score_cmd->add_option("--features-dir", score.features_dir, "Base for feature paths");
  score.o_direction = score_cmd->add_option("--direction", score.direction, "Direction JSON");
  score.o_out = score_cmd->add_option("--out", score.out, "Write weights as JSON lines");
  score.o_caption = score_cmd->add_option("--caption", score.caption, "Score one caption's complexity instead");
  score.o_scorer = score_cmd->add_option("--scorer", score.scorer, "'heuristic' or an LLM scorer URL");
  score.o_lexicon = score_cmd->add_option("--lexicon", score.lexicon, "Lexicon JSON");
  score.o_per_map = score_cmd->add_flag("--per-map", score.per_map, "Fit the direction on each map");
  score.o_grid = score_cmd->add_option("--grid", score.grid, "Expected feature grid (0 disables the check)");
  score.o_threads = score_cmd->add_option("--threads", score.threads, "Scoring threads");

  LossCheckArgs lc;
  auto* lc_cmd = app.add_subcommand("loss-check", "Finite-difference check of every loss gradient");
  lc.o_instances = lc_cmd->add_option("--instances", lc.instances, "Random instances per loss");
  lc.o_h = lc_cmd->add_option("--step", lc.h, "Central difference step");
  lc.o_tolerance = lc_cmd->add_option("--tolerance", lc.tolerance, "Max relative error");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a toy encoder on the synthetic dataset");
  tr.o_out = train_cmd->add_option("--out", tr.out, "Run directory");
  tr.o_epochs = train_cmd->add_option("--epochs", tr.epochs, "Override train.epochs");
  tr.o_loss = train_cmd->add_option("--loss", tr.loss, "nce, cosine, swav or i2t_t2i");
  tr.o_lr = train_cmd->add_option("--lr", tr.lr, "Override train.lr");
  tr.o_corruption = train_cmd->add_option("--corruption", tr.corruption, "Override dataset.corruption_rate");
  tr.o_quality = train_cmd->add_flag("--quality", tr.quality, "Quality-driven pair weights");
  tr.o_uniform = train_cmd->add_flag("--uniform", tr.uniform, "Uniform pair weights");

  ProbeArgs pr;
  auto* probe_cmd = app.add_subcommand("probe", "Linear probe on a run's saved embeddings");
  pr.o_run = probe_cmd->add_option("--run", pr.run, "Run directory");
  pr.o_train_fraction = probe_cmd->add_option("--train-fraction", pr.train_fraction, "Train split share");
  pr.o_iterations = probe_cmd->add_option("--iterations", pr.iterations, "Gradient steps");
  pr.o_lr = probe_cmd->add_option("--lr", pr.lr, "Learning rate");
  pr.o_shuffle = probe_cmd->add_flag("--shuffle-labels", pr.shuffle_labels, "Chance-level control");

  ReportArgs rep;
  auto* report_cmd = app.add_subcommand("report", "Summarise a training run");
  rep.o_run = report_cmd->add_option("--run", rep.run, "Run directory");
  rep.o_csv = report_cmd->add_option("--csv", rep.csv, "Write per-epoch metrics as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto* failed = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << failed->help();
    return kExitUsage;
  }

  try {
    ctx.g.seed_given = o_seed->count() > 0;
    ctx.level = parse_log_level(ctx.g.log_level);
    const std::string config = ctx.g.config_path.empty() ? prescan_config(argc, argv) : ctx.g.config_path;
    if (!config.empty()) {
      ctx.g.config = read_json_file(config);
      if (!ctx.g.config.is_object()) throw UsageError("--config must hold a JSON object");
      if (!ctx.g.seed_given && ctx.g.config.contains("seed")) {
        ctx.g.seed = ctx.g.config.at("seed").get<std::uint64_t>();
      }
      if (ctx.g.config.contains("log_level") && ctx.g.log_level == "warn") {
        ctx.level = parse_log_level(ctx.g.config.at("log_level").get<std::string>());
      }
    }

    if (fit_cmd->parsed()) return run_saliency_fit(ctx, fit);
    if (sscore_cmd->parsed()) return run_saliency_score(ctx, sscore);
    if (plan_cmd->parsed()) return run_plan(ctx, plan);
    if (gen_cmd->parsed()) return run_generate(ctx, gen_args);
    if (score_cmd->parsed()) return run_score(ctx, score);
    if (lc_cmd->parsed()) return run_loss_check(ctx, lc);
    if (train_cmd->parsed()) return run_train(ctx, tr);
    if (probe_cmd->parsed()) return run_probe(ctx, pr);
    if (report_cmd->parsed()) return run_report(ctx, rep);
    err << app.help();
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return kExitDomainError;
  } catch (const Error& e) {
    err << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return kExitDomainError;
  } catch (const json::exception& e) {
    err << "error [parse_error]: " << e.what() << "\n";
    return kExitDomainError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error [io_error]: " << e.what() << "\n";
    return kExitDomainError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomainError;
  }
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"genview"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace genview::cli
