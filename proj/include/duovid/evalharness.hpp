#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "duovid/client.hpp"
#include "json.hpp"

namespace duovid {

enum class Bench { vcg, diverse, mvbench, zeroshot };

inline std::string_view to_string(Bench b) {
  switch (b) {
    case Bench::vcg: return "vcg";
    case Bench::diverse: return "diverse";
    case Bench::mvbench: return "mvbench";
    case Bench::zeroshot: return "zeroshot";
  }
  return "unknown";
}

inline Bench parse_bench(std::string_view text) {
  for (Bench b : {Bench::vcg, Bench::diverse, Bench::mvbench, Bench::zeroshot})
    if (to_string(b) == text) return b;
  fail(ErrorKind::config_error, "unknown benchmark '" + std::string(text) + "'");
}

inline constexpr std::array<const char*, 5> vcg_metrics{"CI", "DO", "CU", "TU", "CO"};
inline constexpr std::array<const char*, 3> diverse_aspects{"caption", "spatial", "reasoning"};
inline constexpr std::array<const char*, 18> diverse_domains{
    "lifestyle", "how-to", "science and technology", "news", "travel", "entertainment", "film", "sports", "comedy",
    "activism", "gaming", "education", "surveillance", "pets", "cooking", "music", "automobile", "traffic"};
inline constexpr std::array<const char*, 20> mvbench_tasks{"AS", "AP", "AA", "FA", "UA", "OE", "OI", "OS", "MD", "AL",
                                                           "ST", "AC", "MC", "MA", "SC", "FP", "CO", "EN", "ER", "CI"};
inline constexpr std::array<const char*, 4> zeroshot_datasets{"MSVD-QA", "MSRVTT-QA", "TGIF-QA", "ActivityNet-QA"};

template <std::size_t N>
bool one_of(const std::array<const char*, N>& set, const std::string& value) {
  return std::any_of(set.begin(), set.end(), [&](const char* s) { return value == s; });
}

// Half-up rounding for display; artifacts keep raw values.
inline double round_half_up(double x, int digits = 2) {
  const double scale = std::pow(10.0, digits);
  const double scaled = std::abs(x) * scale;
  return std::copysign(std::floor(scaled + 0.5 + 1e-9 * std::max(1.0, scaled)) / scale, x);
}

inline std::string format_fixed(double x, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, round_half_up(x, digits));
  return buf;
}

inline double mean_of(const std::vector<double>& v) {
  require(!v.empty(), ErrorKind::invalid_argument, "mean of an empty list");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Average of the five per-metric means.
inline double vcg_average(const std::array<double, 5>& per_metric) {
  return mean_of({per_metric.begin(), per_metric.end()});
}

// Unweighted mean over task accuracies.
inline double task_mean(const std::map<std::string, double>& per_task) {
  std::vector<double> v;
  for (const auto& [_, acc] : per_task) v.push_back(acc);
  return mean_of(v);
}

struct Prediction {
  std::string id;
  std::string dataset;
  std::string question;
  std::string prediction;
  std::string prediction_alt;
};

struct Reference {
  std::string id;
  std::string answer;
  std::string question;
  std::string question_alt;
  nlohmann::json tags = nlohmann::json::object();

  std::optional<std::string> tag(const std::string& name) const {
    if (tags.contains(name) && tags[name].is_string()) return tags[name].get<std::string>();
    return std::nullopt;
  }
};

namespace detail {

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  require(std::filesystem::is_regular_file(path), ErrorKind::io_error, "cannot read " + path.string());
  std::vector<nlohmann::json> out;
  std::size_t line_no = 0;
  for (const auto& line : io::read_lines(path)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse_error, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    require(out.back().is_object(), ErrorKind::schema_error, path.string() + ":" + std::to_string(line_no) + ": not an object");
    out.back()["__line"] = line_no;
  }
  return out;
}

inline std::string id_of(const nlohmann::json& j, const std::string& where) {
  require(j.contains("id") && (j["id"].is_string() || j["id"].is_number_integer()), ErrorKind::schema_error,
          where + ": missing 'id'");
  return j["id"].is_string() ? j["id"].get<std::string>() : std::to_string(j["id"].get<long long>());
}

inline std::string text_field(const nlohmann::json& j, const char* key) {
  return j.contains(key) && j[key].is_string() ? j[key].get<std::string>() : std::string{};
}

}  // namespace detail

inline std::vector<Prediction> load_predictions(const std::filesystem::path& path) {
  std::vector<Prediction> out;
  std::set<std::string> ids;
  for (const auto& j : detail::read_jsonl(path)) {
    const std::string where = path.string() + ":" + std::to_string(j["__line"].get<std::size_t>());
    Prediction p;
    p.id = detail::id_of(j, where);
    require(j.contains("prediction") && j["prediction"].is_string(), ErrorKind::schema_error,
            where + ": missing 'prediction'");
    require(ids.insert(p.id).second, ErrorKind::schema_error, where + ": duplicate id '" + p.id + "'");
    p.dataset = detail::text_field(j, "dataset");
    p.question = detail::text_field(j, "question");
    p.prediction = j["prediction"];
    p.prediction_alt = detail::text_field(j, "prediction_alt");
    out.push_back(std::move(p));
  }
  return out;
}

// Every field other than id/answer/question/question_alt is a tag; a nested
// "tags" object is merged in as well.
inline std::vector<Reference> load_references(const std::filesystem::path& path) {
  std::vector<Reference> out;
  std::set<std::string> ids;
  for (auto j : detail::read_jsonl(path)) {
    const std::string where = path.string() + ":" + std::to_string(j["__line"].get<std::size_t>());
    Reference r;
    r.id = detail::id_of(j, where);
    require(j.contains("answer") && j["answer"].is_string(), ErrorKind::schema_error, where + ": missing 'answer'");
    require(ids.insert(r.id).second, ErrorKind::schema_error, where + ": duplicate id '" + r.id + "'");
    r.answer = j["answer"];
    r.question = detail::text_field(j, "question");
    r.question_alt = detail::text_field(j, "question_alt");
    if (j.contains("tags") && j["tags"].is_object()) r.tags.update(j["tags"]);
    for (const auto& [k, v] : j.items())
      if (k != "id" && k != "answer" && k != "question" && k != "question_alt" && k != "tags" && k != "__line")
        r.tags[k] = v;
    out.push_back(std::move(r));
  }
  return out;
}

struct EvalItem {
  const Reference* reference = nullptr;
  const Prediction* prediction = nullptr;

  const std::string& question() const {
    return reference->question.empty() ? prediction->question : reference->question;
  }
};

struct Coverage {
  std::vector<std::string> missing;
  std::size_t unmatched_predictions = 0;
};

// Pairs predictions with references by id. References without a prediction
// are a coverage gap, which is an error unless explicitly allowed.
inline std::vector<EvalItem> match_items(const std::vector<Prediction>& predictions,
                                         const std::vector<Reference>& references, bool allow_missing,
                                         Coverage& coverage) {
  std::map<std::string, const Prediction*> by_id;
  for (const auto& p : predictions) by_id[p.id] = &p;
  std::vector<EvalItem> items;
  std::set<std::string> used;
  for (const auto& r : references) {
    auto it = by_id.find(r.id);
    if (it == by_id.end()) {
      coverage.missing.push_back(r.id);
      continue;
    }
    items.push_back({&r, it->second});
    used.insert(r.id);
  }
  coverage.unmatched_predictions = predictions.size() - used.size();
  if (!coverage.missing.empty() && !allow_missing) {
    std::string ids;
    for (std::size_t i = 0; i < coverage.missing.size() && i < 10; ++i) ids += (i ? ", " : "") + coverage.missing[i];
    if (coverage.missing.size() > 10) ids += ", ...";
    fail(ErrorKind::coverage_gap, std::to_string(coverage.missing.size()) + " reference(s) have no prediction: " + ids);
  }
  return items;
}

struct JudgeVerdict {
  std::string id;
  std::string metric;
  double value = 0.0;
  std::string raw;
  bool quarantined = false;
  std::string error;
};

inline void to_json(nlohmann::json& j, const JudgeVerdict& v) {
  j = {{"id", v.id}, {"metric", v.metric}, {"raw", v.raw}};
  if (v.quarantined) {
    j["quarantined"] = true;
    j["error"] = v.error;
  } else {
    j["value"] = v.value;
  }
}

// {"score": n} with n in [0, 5].
inline double parse_score_verdict(const std::string& raw) {
  const auto j = extract_json(raw);
  require(j.is_object() && j.contains("score") && j["score"].is_number(), ErrorKind::parse_error,
          "verdict has no numeric 'score'");
  const double s = j["score"].get<double>();
  require(s >= 0.0 && s <= 5.0, ErrorKind::parse_error, "score " + std::to_string(s) + " outside [0, 5]");
  return s;
}

// {"pred": "yes"|"no", "score": n}.
inline std::pair<double, double> parse_qa_verdict(const std::string& raw) {
  const double score = parse_score_verdict(raw);
  const auto j = extract_json(raw);
  require(j.contains("pred") && j["pred"].is_string(), ErrorKind::parse_error, "verdict has no 'pred'");
  std::string pred = j["pred"];
  std::transform(pred.begin(), pred.end(), pred.begin(), [](unsigned char c) { return std::tolower(c); });
  require(pred == "yes" || pred == "no", ErrorKind::parse_error, "pred must be yes or no, got '" + pred + "'");
  return {pred == "yes" ? 1.0 : 0.0, score};
}

struct DatasetScore {
  double accuracy = 0.0;
  double score = 0.0;
  std::size_t count = 0;
};

struct BenchmarkScore {
  std::string bench;
  std::map<std::string, double> per_metric;
  std::optional<double> average;
  std::optional<std::map<std::string, double>> breakdown;
  std::optional<std::map<std::string, double>> per_task;
  std::optional<std::map<std::string, std::map<std::string, double>>> per_domain;
  std::optional<std::map<std::string, DatasetScore>> per_dataset;
  std::size_t items = 0;
  std::size_t quarantined = 0;
  Coverage coverage;
};

inline void to_json(nlohmann::json& j, const BenchmarkScore& s) {
  j = {{"bench", s.bench},
       {"per_metric", s.per_metric},
       {"average", s.average ? nlohmann::json(*s.average) : nlohmann::json(nullptr)},
       {"items", s.items},
       {"quarantined", s.quarantined},
       {"missing", s.coverage.missing},
       {"unmatched_predictions", s.coverage.unmatched_predictions}};
  if (s.breakdown) j["breakdown"] = *s.breakdown;
  if (s.per_task) j["per_task"] = *s.per_task;
  if (s.per_domain) j["per_domain"] = *s.per_domain;
  if (s.per_dataset) {
    nlohmann::json d = nlohmann::json::object();
    for (const auto& [name, v] : *s.per_dataset) d[name] = {{"accuracy", v.accuracy}, {"score", v.score}, {"count", v.count}};
    j["per_dataset"] = d;
  }
}

struct EvalOptions {
  bool allow_missing = false;
  std::size_t concurrency = 1;
  std::uint64_t seed = 0;
  std::string judge_model;  // empty selects the benchmark default
  std::filesystem::path quarantine;
};

inline std::string default_judge_model(Bench b) {
  return b == Bench::diverse ? "gpt-3.5-turbo-0125" : "gpt-3.5-turbo-0613";
}

struct EvalResult {
  BenchmarkScore score;
  std::vector<JudgeVerdict> verdicts;
};

namespace detail {

struct JudgeTask {
  std::size_t item;
  std::string metric;
};

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

// Issues every (item, metric) judge call, up to `concurrency` at a time.
// Results land in task order, so aggregation never depends on arrival order.
inline std::vector<JudgeVerdict> run_judge(const std::vector<EvalItem>& items, const std::vector<std::string>& metrics,
                                           TextGenClient& judge, const TemplateStore& templates,
                                           const EvalOptions& opts, const std::string& model) {
  std::vector<JudgeTask> tasks;
  for (std::size_t i = 0; i < items.size(); ++i)
    for (const auto& m : metrics) tasks.push_back({i, m});
  std::vector<JudgeVerdict> verdicts(tasks.size());
  parallel_for(tasks.size(), opts.concurrency, [&](std::size_t t) {
    const auto& item = items[tasks[t].item];
    const std::string& metric = tasks[t].metric;
    std::map<std::string, std::string> vars = {
        {"question", item.question()}, {"answer", item.reference->answer}, {"prediction", item.prediction->prediction}};
    const std::string template_id = metric == "qa" ? "judge_qa" : "judge_" + lower(metric);
    if (metric == "CO") {
      vars["question_alt"] = item.reference->question_alt.empty() ? item.question() : item.reference->question_alt;
      vars["prediction_alt"] =
          item.prediction->prediction_alt.empty() ? item.prediction->prediction : item.prediction->prediction_alt;
    }
    auto request = templates.request(template_id, vars, derive_seed(opts.seed, {item.reference->id, metric}), model);
    std::string raw;
    try {
      raw = judge.generate(request);
    } catch (const ClientFailure& e) {
      fail(ErrorKind::pipeline_error, judge.name() + " failed judging '" + item.reference->id + "': " + e.what());
    }
    JudgeVerdict v{item.reference->id, metric, 0.0, raw, false, {}};
    try {
      v.value = metric == "qa" ? parse_qa_verdict(raw).second : parse_score_verdict(raw);
    } catch (const Error& e) {
      v.quarantined = true;
      v.error = e.what();
    }
    verdicts[t] = std::move(v);
  });

  // Zero-shot verdicts carry accuracy and score; split them into two rows.
  std::vector<JudgeVerdict> out;
  for (auto& v : verdicts) {
    if (v.metric == "qa") {
      JudgeVerdict acc = v, score = v;
      acc.metric = "accuracy";
      score.metric = "score";
      if (!v.quarantined) acc.value = parse_qa_verdict(v.raw).first;
      out.push_back(std::move(acc));
      out.push_back(std::move(score));
    } else {
      out.push_back(std::move(v));
    }
  }
  if (!opts.quarantine.empty())
    for (const auto& v : out)
      if (v.quarantined && v.metric != "score") io::append_line(opts.quarantine, nlohmann::json(v).dump());
  return out;
}

inline std::size_t count_quarantined(const std::vector<JudgeVerdict>& verdicts) {
  std::set<std::string> bad;
  for (const auto& v : verdicts)
    if (v.quarantined) bad.insert(v.id + "\x1f" + (v.metric == "accuracy" || v.metric == "score" ? "qa" : v.metric));
  return bad.size();
}

// Mean per metric over the verdicts of the given item ids.
inline std::map<std::string, double> metric_means(const std::vector<JudgeVerdict>& verdicts,
                                                  const std::set<std::string>* ids = nullptr) {
  std::map<std::string, std::vector<double>> values;
  for (const auto& v : verdicts)
    if (!v.quarantined && (!ids || ids->contains(v.id))) values[v.metric].push_back(v.value);
  std::map<std::string, double> out;
  for (const auto& [m, vals] : values) out[m] = mean_of(vals);
  return out;
}

inline std::optional<double> five_metric_average(const std::map<std::string, double>& per_metric) {
  std::vector<double> v;
  for (const char* m : vcg_metrics)
    if (auto it = per_metric.find(m); it != per_metric.end()) v.push_back(it->second);
  if (v.empty()) return std::nullopt;
  return mean_of(v);
}

inline std::vector<std::string> vcg_metric_list() { return {vcg_metrics.begin(), vcg_metrics.end()}; }

}  // namespace detail

// Five judge metrics per item; average is the mean of the five metric means.
inline EvalResult score_vcgbench(const std::vector<Prediction>& predictions, const std::vector<Reference>& references,
                                 TextGenClient& judge, const TemplateStore& templates, const EvalOptions& opts = {}) {
  EvalResult r;
  r.score.bench = "vcg";
  const auto items = match_items(predictions, references, opts.allow_missing, r.score.coverage);
  r.verdicts = detail::run_judge(items, detail::vcg_metric_list(), judge, templates, opts,
                                 opts.judge_model.empty() ? default_judge_model(Bench::vcg) : opts.judge_model);
  r.score.items = items.size();
  r.score.quarantined = detail::count_quarantined(r.verdicts);
  r.score.per_metric = detail::metric_means(r.verdicts);
  r.score.average = detail::five_metric_average(r.score.per_metric);
  return r;
}

// VCGBench metrics plus an aspect breakdown (mean correctness score over the
// items of each aspect) and a per-domain table. Aspects and domains with no
// items are absent.
inline EvalResult score_diverse(const std::vector<Prediction>& predictions, const std::vector<Reference>& references,
                                TextGenClient& judge, const TemplateStore& templates, const EvalOptions& opts = {}) {
  for (const auto& ref : references) {
    const auto aspect = ref.tag("aspect");
    require(aspect.has_value(), ErrorKind::schema_error, "reference '" + ref.id + "' has no aspect tag");
    require(one_of(diverse_aspects, *aspect), ErrorKind::schema_error,
            "reference '" + ref.id + "' has unknown aspect '" + *aspect + "'");
    const auto domain = ref.tag("domain");
    require(domain.has_value(), ErrorKind::schema_error, "reference '" + ref.id + "' has no domain tag");
    require(one_of(diverse_domains, *domain), ErrorKind::schema_error,
            "reference '" + ref.id + "' has unknown domain '" + *domain + "'");
  }
  EvalResult r;
  r.score.bench = "diverse";
  const auto items = match_items(predictions, references, opts.allow_missing, r.score.coverage);
  r.verdicts = detail::run_judge(items, detail::vcg_metric_list(), judge, templates, opts,
                                 opts.judge_model.empty() ? default_judge_model(Bench::diverse) : opts.judge_model);
  r.score.items = items.size();
  r.score.quarantined = detail::count_quarantined(r.verdicts);
  r.score.per_metric = detail::metric_means(r.verdicts);
  r.score.average = detail::five_metric_average(r.score.per_metric);

  std::map<std::string, std::set<std::string>> by_aspect, by_domain;
  for (const auto& item : items) {
    by_aspect[*item.reference->tag("aspect")].insert(item.reference->id);
    by_domain[*item.reference->tag("domain")].insert(item.reference->id);
  }
  std::map<std::string, double> breakdown;
  for (const auto& [aspect, ids] : by_aspect) {
    auto means = detail::metric_means(r.verdicts, &ids);
    if (means.contains("CI")) breakdown[aspect] = means["CI"];
  }
  r.score.breakdown = breakdown;
  std::map<std::string, std::map<std::string, double>> domains;
  for (const auto& [domain, ids] : by_domain) {
    auto means = detail::metric_means(r.verdicts, &ids);
    if (auto avg = detail::five_metric_average(means)) means["average"] = *avg;
    means["count"] = static_cast<double>(ids.size());
    domains[domain] = means;
  }
  r.score.per_domain = domains;
  return r;
}

// The option letter a free-text answer commits to: "B", "(B) ...", "B. ...".
inline std::optional<char> choice_letter(const std::string& text) {
  std::size_t i = text.find_first_not_of(" \t\r\n(");
  if (i == std::string::npos) return std::nullopt;
  const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(text[i])));
  if (c < 'A' || c > 'Z') return std::nullopt;
  if (i + 1 < text.size() && std::isalpha(static_cast<unsigned char>(text[i + 1]))) return std::nullopt;
  return c;
}

// Per-task accuracy in percent; the average is the unweighted mean over the
// tasks present. No judge is involved.
inline EvalResult score_mvbench(const std::vector<Prediction>& predictions, const std::vector<Reference>& answer_key,
                                const EvalOptions& opts = {}) {
  for (const auto& ref : answer_key) {
    const auto task = ref.tag("task");
    require(task.has_value(), ErrorKind::schema_error, "answer '" + ref.id + "' has no task code");
    require(one_of(mvbench_tasks, *task), ErrorKind::schema_error,
            "answer '" + ref.id + "' has unknown task code '" + *task + "'");
    require(choice_letter(ref.answer).has_value(), ErrorKind::schema_error,
            "answer '" + ref.id + "' is not an option letter");
  }
  EvalResult r;
  r.score.bench = "mvbench";
  const auto items = match_items(predictions, answer_key, opts.allow_missing, r.score.coverage);
  std::map<std::string, std::pair<std::size_t, std::size_t>> tally;
  for (const auto& item : items) {
    const bool correct = choice_letter(item.prediction->prediction) == choice_letter(item.reference->answer);
    auto& [right, total] = tally[*item.reference->tag("task")];
    right += correct;
    ++total;
    r.verdicts.push_back({item.reference->id, "accuracy", correct ? 1.0 : 0.0, item.prediction->prediction, false, {}});
  }
  std::map<std::string, double> per_task;
  for (const auto& [task, t] : tally)
    per_task[task] = 100.0 * static_cast<double>(t.first) / static_cast<double>(t.second);
  r.score.items = items.size();
  r.score.per_task = per_task;
  if (!per_task.empty()) {
    r.score.average = task_mean(per_task);
    r.score.per_metric["accuracy"] = *r.score.average;
  }
  return r;
}

// Accuracy (percent judged correct) and mean judge score per dataset. Empty
// datasets are absent.
inline EvalResult score_zeroshot(const std::vector<Prediction>& predictions, const std::vector<Reference>& references,
                                 TextGenClient& judge, const TemplateStore& templates, const EvalOptions& opts = {}) {
  std::map<std::string, const Prediction*> by_id;
  for (const auto& p : predictions) by_id[p.id] = &p;
  auto dataset_of = [&](const Reference& ref) {
    if (auto d = ref.tag("dataset")) return *d;
    auto it = by_id.find(ref.id);
    return it == by_id.end() ? std::string{} : it->second->dataset;
  };
  for (const auto& ref : references) {
    const std::string d = dataset_of(ref);
    require(one_of(zeroshot_datasets, d), ErrorKind::schema_error,
            "reference '" + ref.id + "' has unknown dataset '" + d + "'");
  }
  EvalResult r;
  r.score.bench = "zeroshot";
  const auto items = match_items(predictions, references, opts.allow_missing, r.score.coverage);
  r.verdicts = detail::run_judge(items, {"qa"}, judge, templates, opts,
                                 opts.judge_model.empty() ? default_judge_model(Bench::zeroshot) : opts.judge_model);
  r.score.items = items.size();
  r.score.quarantined = detail::count_quarantined(r.verdicts);
  std::map<std::string, std::set<std::string>> by_dataset;
  for (const auto& item : items) by_dataset[dataset_of(*item.reference)].insert(item.reference->id);
  std::map<std::string, DatasetScore> per_dataset;
  for (const auto& [d, ids] : by_dataset) {
    auto means = detail::metric_means(r.verdicts, &ids);
    if (!means.contains("accuracy")) continue;
    per_dataset[d] = {100.0 * means["accuracy"], means["score"], ids.size()};
  }
  r.score.per_dataset = per_dataset;
  return r;
}

inline EvalResult score_bench(Bench bench, const std::vector<Prediction>& predictions,
                              const std::vector<Reference>& references, TextGenClient& judge,
                              const TemplateStore& templates, const EvalOptions& opts = {}) {
  switch (bench) {
    case Bench::vcg: return score_vcgbench(predictions, references, judge, templates, opts);
    case Bench::diverse: return score_diverse(predictions, references, judge, templates, opts);
    case Bench::mvbench: return score_mvbench(predictions, references, opts);
    case Bench::zeroshot: return score_zeroshot(predictions, references, judge, templates, opts);
  }
  fail(ErrorKind::config_error, "unknown benchmark");
}

// Writes results.json and verdicts.jsonl into output_dir.
inline void write_eval_artifacts(const EvalResult& r, const std::filesystem::path& output_dir) {
  std::filesystem::create_directories(output_dir);
  io::atomic_write(output_dir / "results.json", nlohmann::json(r.score).dump(2) + "\n");
  std::string lines;
  for (const auto& v : r.verdicts) lines += nlohmann::json(v).dump() + "\n";
  io::atomic_write(output_dir / "verdicts.jsonl", lines);
}

namespace detail {

inline std::string cell(const nlohmann::json& v, int digits = 2) {
  return v.is_number() ? format_fixed(v.get<double>(), digits) : std::string("-");
}

inline std::string table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::string out = "|";
  for (const auto& h : header) out += " " + h + " |";
  out += "\n|";
  for (std::size_t i = 0; i < header.size(); ++i) out += i ? "---:|" : "---|";
  out += "\n";
  for (const auto& row : rows) {
    out += "|";
    for (const auto& c : row) out += " " + c + " |";
    out += "\n";
  }
  return out;
}

}  // namespace detail

// Markdown tables from results.json documents, values rounded half-up.
inline std::string render_report(const std::vector<nlohmann::json>& results) {
  std::string out;
  for (const auto& s : results) {
    const std::string bench = s.value("bench", "");
    const auto& pm = s.contains("per_metric") ? s["per_metric"] : nlohmann::json::object();
    auto metric = [&](const char* m) { return pm.contains(m) ? pm[m] : nlohmann::json(nullptr); };
    if (bench == "vcg" || bench == "diverse") {
      std::vector<std::string> header{"Benchmark"};
      std::vector<std::string> row{bench};
      for (const char* m : vcg_metrics) header.push_back(m), row.push_back(detail::cell(metric(m)));
      header.push_back("Avg.");
      row.push_back(detail::cell(s.value("average", nlohmann::json(nullptr))));
      if (bench == "diverse") {
        const auto& b = s.contains("breakdown") ? s["breakdown"] : nlohmann::json::object();
        for (const char* a : diverse_aspects) {
          std::string name = a;
          name[0] = static_cast<char>(std::toupper(name[0]));
          header.push_back(name);
          row.push_back(detail::cell(b.contains(a) ? b[a] : nlohmann::json(nullptr)));
        }
      }
      out += "## " + bench + "\n\n" + detail::table(header, {row}) + "\n";
    } else if (bench == "mvbench") {
      std::vector<std::string> header{"Benchmark"}, row{bench};
      const auto& t = s.contains("per_task") ? s["per_task"] : nlohmann::json::object();
      for (const char* code : mvbench_tasks) {
        header.push_back(code);
        row.push_back(detail::cell(t.contains(code) ? t[code] : nlohmann::json(nullptr), 1));
      }
      header.push_back("Avg.");
      row.push_back(detail::cell(s.value("average", nlohmann::json(nullptr)), 1));
      out += "## mvbench\n\n" + detail::table(header, {row}) + "\n";
    } else if (bench == "zeroshot") {
      std::vector<std::vector<std::string>> rows;
      const auto& d = s.contains("per_dataset") ? s["per_dataset"] : nlohmann::json::object();
      for (const char* name : zeroshot_datasets)
        if (d.contains(name))
          rows.push_back({name, detail::cell(d[name]["accuracy"], 1), detail::cell(d[name]["score"], 1),
                          std::to_string(d[name]["count"].get<std::size_t>())});
        else
          rows.push_back({name, "-", "-", "0"});
      out += "## zeroshot\n\n" + detail::table({"Dataset", "Accuracy", "Score", "Items"}, rows) + "\n";
    }
  }
  return out;
}

}  // namespace duovid
