#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "duovid/client.hpp"
#include "duovid/media.hpp"
#include "json.hpp"

namespace duovid {

enum class QACategory { dense_caption, detailed_temporal, generic_qa, spatial, reasoning, short_temporal };
enum class QAStyle { descriptive, concise };

inline constexpr std::array<QACategory, 6> all_categories{QACategory::dense_caption, QACategory::detailed_temporal,
                                                          QACategory::generic_qa,    QACategory::spatial,
                                                          QACategory::reasoning,     QACategory::short_temporal};

inline std::string_view to_string(QACategory c) {
  switch (c) {
    case QACategory::dense_caption: return "dense_caption";
    case QACategory::detailed_temporal: return "detailed_temporal";
    case QACategory::generic_qa: return "generic_qa";
    case QACategory::spatial: return "spatial";
    case QACategory::reasoning: return "reasoning";
    case QACategory::short_temporal: return "short_temporal";
  }
  return "unknown";
}

inline std::string_view to_string(QAStyle s) { return s == QAStyle::descriptive ? "descriptive" : "concise"; }

inline std::optional<QACategory> find_category(std::string_view text) {
  for (auto c : all_categories)
    if (to_string(c) == text) return c;
  return std::nullopt;
}

inline QACategory parse_category(std::string_view text) {
  auto c = find_category(text);
  require(c.has_value(), ErrorKind::schema_error, "unknown QA category '" + std::string(text) + "'");
  return *c;
}

// The first three categories are descriptive, the last three concise.
inline QAStyle style_of(QACategory c) {
  return static_cast<int>(c) < 3 ? QAStyle::descriptive : QAStyle::concise;
}

inline std::string_view category_definition(QACategory c) {
  switch (c) {
    case QACategory::dense_caption:
      return "Dense captioning. Ask for a description of the video that covers the entire sequence of events and "
             "the visual details.";
    case QACategory::detailed_temporal:
      return "Detailed temporal information. Ask about the sequence of events and how they depend on each other.";
    case QACategory::generic_qa:
      return "Generic question answering. Ask in-depth questions about the actions, their consequences and other "
             "detailed aspects of the video.";
    case QACategory::spatial:
      return "Spatial reasoning. Ask about spatial details such as the scene setting, the number of objects, attire "
             "and locations.";
    case QACategory::reasoning:
      return "Reasoning. Ask about the causal relationships between events.";
    case QACategory::short_temporal:
      return "Short temporal questions. Ask about specific moments or sequences, such as what happened at the "
             "beginning or the end.";
  }
  return "";
}

inline std::string_view style_definition(QAStyle s) {
  return s == QAStyle::descriptive ? "Write complete, detailed answers of several sentences."
                                   : "Write short answers of one sentence or a few words.";
}

struct AnnotatorModels {
  std::string captioner = "llava-v1.6";
  std::string integrator = "gpt-4";
  std::string qa = "gpt-3.5-turbo";
};

struct AnnotateOptions {
  std::uint64_t seed = 0;
  std::size_t pairs_per_category = 1;
  std::vector<QACategory> categories{all_categories.begin(), all_categories.end()};
  double scene_threshold = default_scene_threshold;
  double fps = 25.0;
  AnnotatorModels models;
  std::size_t jobs = 1;
};

struct DenseDescription {
  std::string video_id;
  std::string text;
  std::vector<std::size_t> source_keyframes;
  std::string gt_caption;
  std::vector<std::string> frame_captions;
};

inline void to_json(nlohmann::json& j, const DenseDescription& d) {
  j = {{"video_id", d.video_id},
       {"text", d.text},
       {"source_keyframes", d.source_keyframes},
       {"provenance", {{"gt_caption", d.gt_caption}, {"frame_captions", d.frame_captions}}}};
}

struct QAPair {
  std::string question;
  std::string answer;
  QACategory category = QACategory::dense_caption;
  QAStyle style = QAStyle::descriptive;
};

// A pipeline failure that carries whatever was produced before it.
class PipelineFailure : public Error {
 public:
  PipelineFailure(const std::string& message, nlohmann::json partial)
      : Error(ErrorKind::pipeline_error, message), partial_(std::move(partial)) {}
  const nlohmann::json& partial() const noexcept { return partial_; }

 private:
  nlohmann::json partial_;
};

namespace detail {

inline std::string call_client(TextGenClient& client, const GenRequest& request) {
  try {
    return client.generate(request);
  } catch (const ClientFailure& e) {
    fail(ErrorKind::pipeline_error, client.name() + " failed on '" + request.template_id + "': " + e.what());
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

}  // namespace detail

// One description per keyframe, in keyframe order.
inline std::vector<std::string> caption_keyframes(const std::string& video_id, const FrameArray& frames,
                                                  const std::vector<std::size_t>& keyframes, TextGenClient& client,
                                                  const TemplateStore& templates, const AnnotateOptions& opts = {}) {
  require(!keyframes.empty(), ErrorKind::invalid_argument, "caption_keyframes needs at least one keyframe");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < keyframes.size(); ++i) {
    const std::size_t f = keyframes[i];
    require(f < frames.frames(), ErrorKind::invalid_argument, "keyframe " + std::to_string(f) + " out of range");
    std::ostringstream ts;
    ts.precision(3);
    ts << std::fixed << static_cast<double>(f) / opts.fps;
    auto request = templates.request("frame_caption", {{"frame_index", std::to_string(f)}, {"timestamp", ts.str()}},
                                     derive_seed(opts.seed, {video_id, "frame_caption", std::to_string(f)}),
                                     opts.models.captioner);
    request.images.push_back(io::encode_png(frames.frame(f)));
    try {
      out.push_back(detail::trim(detail::call_client(client, request)));
    } catch (const Error& e) {
      throw PipelineFailure(video_id + ": " + e.what(),
                            {{"video_id", video_id}, {"stage", "frame_caption"}, {"keyframes", keyframes},
                             {"frame_captions", out}});
    }
  }
  return out;
}

inline DenseDescription integrate_description(const std::string& video_id, const std::string& gt_caption,
                                              const std::vector<std::string>& frame_descriptions,
                                              const std::vector<std::size_t>& keyframes, TextGenClient& client,
                                              const TemplateStore& templates, const AnnotateOptions& opts = {}) {
  require(!gt_caption.empty(), ErrorKind::invalid_argument, video_id + ": ground truth caption is empty");
  require(!frame_descriptions.empty() && frame_descriptions.size() == keyframes.size(), ErrorKind::invalid_argument,
          video_id + ": need one frame description per keyframe");
  std::string joined;
  for (std::size_t i = 0; i < frame_descriptions.size(); ++i) {
    if (i) joined += "\n";
    joined += "Keyframe " + std::to_string(i + 1) + ": " + frame_descriptions[i];
  }
  auto request = templates.request("dense_description", {{"gt_caption", gt_caption}, {"frame_descriptions", joined}},
                                   derive_seed(opts.seed, {video_id, "dense_description"}), opts.models.integrator);
  std::string text;
  try {
    text = detail::trim(detail::call_client(client, request));
  } catch (const Error& e) {
    throw PipelineFailure(video_id + ": " + e.what(), {{"video_id", video_id},
                                                       {"stage", "dense_description"},
                                                       {"keyframes", keyframes},
                                                       {"frame_captions", frame_descriptions}});
  }
  require(!text.empty(), ErrorKind::parse_error, video_id + ": empty dense description");
  return {video_id, text, keyframes, gt_caption, frame_descriptions};
}

// Parses {"pairs": [...]} or a bare array of {question, answer} objects.
inline std::vector<std::pair<std::string, std::string>> parse_qa_payload(const std::string& raw) {
  const nlohmann::json j = extract_json(raw);
  const nlohmann::json* pairs = &j;
  if (j.is_object()) {
    require(j.contains("pairs"), ErrorKind::parse_error, "QA payload has no 'pairs'");
    pairs = &j["pairs"];
  }
  require(pairs->is_array() && !pairs->empty(), ErrorKind::parse_error, "QA payload has no pairs");
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& p : *pairs) {
    require(p.is_object() && p.contains("question") && p.contains("answer") && p["question"].is_string() &&
                p["answer"].is_string(),
            ErrorKind::parse_error, "QA pair without string question and answer");
    std::string q = detail::trim(p["question"].get<std::string>()), a = detail::trim(p["answer"].get<std::string>());
    require(!q.empty() && !a.empty(), ErrorKind::parse_error, "QA pair with empty question or answer");
    out.emplace_back(std::move(q), std::move(a));
  }
  return out;
}

// One request per category; labels come from the request. Unparseable
// responses go to the quarantine file and raise a parse error.
inline std::vector<QAPair> generate_qa(const std::string& gt_caption, const DenseDescription& dense,
                                       TextGenClient& client, const TemplateStore& templates,
                                       const AnnotateOptions& opts = {},
                                       const std::filesystem::path& quarantine = {}) {
  require(!dense.text.empty(), ErrorKind::invalid_argument, dense.video_id + ": dense description is empty");
  require(opts.pairs_per_category >= 1, ErrorKind::config_error, "pairs_per_category must be at least 1");
  std::vector<QAPair> out;
  for (QACategory c : opts.categories) {
    const QAStyle style = style_of(c);
    auto request = templates.request("qa_generation",
                                     {{"gt_caption", gt_caption},
                                      {"dense_description", dense.text},
                                      {"count", std::to_string(opts.pairs_per_category)},
                                      {"category", std::string(to_string(c))},
                                      {"category_definition", std::string(category_definition(c))},
                                      {"style", std::string(to_string(style))},
                                      {"style_definition", std::string(style_definition(style))}},
                                     derive_seed(opts.seed, {dense.video_id, "qa_generation", to_string(c)}),
                                     opts.models.qa);
    std::string raw;
    try {
      raw = detail::call_client(client, request);
    } catch (const Error& e) {
      throw PipelineFailure(dense.video_id + ": " + e.what(),
                            {{"video_id", dense.video_id}, {"stage", "qa_generation"}, {"dense", dense}});
    }
    try {
      for (auto& [q, a] : parse_qa_payload(raw)) out.push_back({std::move(q), std::move(a), c, style});
    } catch (const Error& e) {
      if (!quarantine.empty())
        io::append_line(quarantine, nlohmann::json{{"video_id", dense.video_id},
                                                   {"category", to_string(c)},
                                                   {"template_id", request.template_id},
                                                   {"error", e.what()},
                                                   {"raw", raw}}
                                        .dump());
      fail(ErrorKind::parse_error, dense.video_id + " (" + std::string(to_string(c)) + "): " + e.what() +
                                       "; raw payload: " + raw);
    }
  }
  return out;
}

struct CaptionRecord {
  std::string video_id;
  std::string caption;
};

inline std::vector<CaptionRecord> load_captions(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorKind::io_error, "captions file " + path.string() + " not found");
  std::vector<CaptionRecord> out;
  std::size_t line_no = 0;
  for (const auto& line : io::read_lines(path)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse_error, where + ": " + e.what());
    }
    for (const char* key : {"video_id", "caption"})
      require(j.contains(key) && j[key].is_string() && !j[key].get<std::string>().empty(), ErrorKind::schema_error,
              where + ": missing or empty '" + key + "'");
    out.push_back({j["video_id"], j["caption"]});
  }
  return out;
}

struct AnnotatedVideo {
  std::string video_id;
  SceneList scenes;
  DenseDescription dense;
  std::vector<QAPair> pairs;
};

// Keyframes, frame captions, dense description, QA pairs for one clip.
inline AnnotatedVideo annotate_video(const std::string& video_id, const std::string& gt_caption,
                                     const FrameArray& frames, TextGenClient& client, const TemplateStore& templates,
                                     const AnnotateOptions& opts = {}, const std::filesystem::path& quarantine = {}) {
  AnnotatedVideo out;
  out.video_id = video_id;
  out.scenes = detect_scenes(frames, opts.scene_threshold);
  auto captions = caption_keyframes(video_id, frames, out.scenes.keyframes, client, templates, opts);
  out.dense = integrate_description(video_id, gt_caption, captions, out.scenes.keyframes, client, templates, opts);
  out.pairs = generate_qa(gt_caption, out.dense, client, templates, opts, quarantine);
  return out;
}

inline nlohmann::json qa_record(const AnnotatedVideo& v, const QAPair& p, const TemplateStore& templates,
                                const AnnotateOptions& opts) {
  return {{"video_id", v.video_id},
          {"question", p.question},
          {"answer", p.answer},
          {"category", to_string(p.category)},
          {"style", to_string(p.style)},
          {"provenance",
           {{"gt_caption", v.dense.gt_caption},
            {"keyframes", v.dense.source_keyframes},
            {"dense_description", v.dense.text},
            {"models", {{"captioner", opts.models.captioner}, {"integrator", opts.models.integrator}, {"qa", opts.models.qa}}},
            {"templates",
             {{"frame_caption", templates.version("frame_caption")},
              {"dense_description", templates.version("dense_description")},
              {"qa_generation", templates.version("qa_generation")}}},
            {"seed", opts.seed}}}};
}

struct AnnotateFailure {
  std::string video_id;
  std::string kind;
  std::string message;
};

struct AnnotateReport {
  std::size_t videos = 0;
  std::size_t annotated = 0;
  std::size_t pairs = 0;
  std::vector<AnnotateFailure> failures;
  std::filesystem::path output;
};

inline void to_json(nlohmann::json& j, const AnnotateReport& r) {
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& f : r.failures) failures.push_back({{"video_id", f.video_id}, {"kind", f.kind}, {"message", f.message}});
  j = {{"videos", r.videos}, {"annotated", r.annotated}, {"pairs", r.pairs}, {"failures", failures},
       {"output", r.output.string()}};
}

// Annotates every captioned clip. Writes into output_dir:
//   instructions.jsonl   QA records in caption-file order
//   descriptions.jsonl   dense descriptions
//   quarantine.jsonl     unparseable QA responses
//   partial/<id>.json    what a failed clip produced before failing
// A failed clip is reported and skipped; the others still complete.
inline AnnotateReport annotate_dataset(const std::filesystem::path& captions_path,
                                       const std::filesystem::path& video_root,
                                       const std::filesystem::path& output_dir, TextGenClient& client,
                                       const TemplateStore& templates, const AnnotateOptions& opts = {}) {
  const auto captions = load_captions(captions_path);
  std::filesystem::create_directories(output_dir);
  const auto quarantine = output_dir / "quarantine.jsonl";
  std::filesystem::remove(quarantine);
  std::filesystem::remove_all(output_dir / "partial");

  std::vector<std::optional<AnnotatedVideo>> results(captions.size());
  std::vector<std::optional<AnnotateFailure>> failures(captions.size());
  std::vector<nlohmann::json> partials(captions.size());
  parallel_for(captions.size(), opts.jobs, [&](std::size_t i) {
    const auto& c = captions[i];
    try {
      const std::filesystem::path raw = video_root / (c.video_id + ".dvt");
      const std::filesystem::path path = std::filesystem::is_regular_file(raw) ? raw : video_root / c.video_id;
      require(std::filesystem::exists(path), ErrorKind::io_error, "no video for '" + c.video_id + "' under " + video_root.string());
      auto source = open_frame_source(path, c.video_id);
      results[i] = annotate_video(c.video_id, c.caption, source->read_all(), client, templates, opts, quarantine);
    } catch (const PipelineFailure& e) {
      failures[i] = AnnotateFailure{c.video_id, std::string(to_string(e.kind())), e.what()};
      partials[i] = e.partial();
    } catch (const Error& e) {
      failures[i] = AnnotateFailure{c.video_id, std::string(to_string(e.kind())), e.what()};
    }
  });

  AnnotateReport report;
  report.videos = captions.size();
  report.output = output_dir / "instructions.jsonl";
  std::string lines, descriptions;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    if (failures[i]) {
      report.failures.push_back(*failures[i]);
      if (!partials[i].is_null())
        io::atomic_write(output_dir / "partial" / (captions[i].video_id + ".json"), partials[i].dump(2) + "\n");
      continue;
    }
    ++report.annotated;
    descriptions += nlohmann::json(results[i]->dense).dump() + "\n";
    for (const auto& p : results[i]->pairs) {
      lines += qa_record(*results[i], p, templates, opts).dump() + "\n";
      ++report.pairs;
    }
  }
  io::atomic_write(report.output, lines);
  io::atomic_write(output_dir / "descriptions.jsonl", descriptions);
  return report;
}

struct SchemaIssue {
  std::size_t line = 0;
  std::string message;
};

struct DuplicateRecord {
  std::size_t line = 0;
  std::size_t first_line = 0;
  std::string video_id;
  std::string question;
};

struct DatasetReport {
  std::size_t records = 0;
  std::vector<SchemaIssue> errors;
  std::map<std::string, std::size_t> histogram;
  std::vector<DuplicateRecord> duplicates;

  bool ok() const noexcept { return errors.empty(); }
};

inline void to_json(nlohmann::json& j, const DatasetReport& r) {
  nlohmann::json errors = nlohmann::json::array(), dups = nlohmann::json::array();
  for (const auto& e : r.errors) errors.push_back({{"line", e.line}, {"message", e.message}});
  for (const auto& d : r.duplicates)
    dups.push_back({{"line", d.line}, {"first_line", d.first_line}, {"video_id", d.video_id}, {"question", d.question}});
  j = {{"records", r.records}, {"errors", errors}, {"histogram", r.histogram}, {"duplicates", dups}};
}

// Checks each line of an instruction JSONL file against the output schema.
inline DatasetReport validate_dataset(const std::filesystem::path& path) {
  require(std::filesystem::is_regular_file(path), ErrorKind::io_error, "cannot read " + path.string());
  DatasetReport report;
  std::map<std::pair<std::string, std::string>, std::size_t> seen;
  std::size_t line_no = 0;
  for (const auto& line : io::read_lines(path)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    ++report.records;
    auto issue = [&](std::string message) { report.errors.push_back({line_no, std::move(message)}); };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      issue(std::string("invalid JSON: ") + e.what());
      continue;
    }
    if (!j.is_object()) {
      issue("record is not an object");
      continue;
    }
    bool valid = true;
    for (const char* key : {"video_id", "question", "answer", "category", "style"})
      if (!j.contains(key) || !j[key].is_string() || j[key].get<std::string>().empty()) {
        issue(std::string("missing or empty '") + key + "'");
        valid = false;
      }
    if (!j.contains("provenance") || !j["provenance"].is_object()) {
      issue("missing 'provenance' object");
      valid = false;
    }
    if (j.contains("category") && j["category"].is_string()) {
      const std::string cat = j["category"];
      if (auto c = find_category(cat)) {
        ++report.histogram[cat];
        if (j.contains("style") && j["style"].is_string() && j["style"] != to_string(style_of(*c))) {
          issue("style '" + j["style"].get<std::string>() + "' does not match category '" + cat + "'");
          valid = false;
        }
      } else if (!cat.empty()) {
        issue("unknown category '" + cat + "'");
        valid = false;
      }
    }
    if (!valid) continue;
    const auto key = std::make_pair(j["video_id"].get<std::string>(), j["question"].get<std::string>());
    if (auto [it, fresh] = seen.emplace(key, line_no); !fresh)
      report.duplicates.push_back({line_no, it->second, key.first, key.second});
  }
  return report;
}

}  // namespace duovid
