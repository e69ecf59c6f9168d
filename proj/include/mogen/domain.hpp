// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mogen/common.hpp"
#include "mogen/geometry.hpp"
#include "mogen/rng.hpp"

namespace mogen::domain {

// ---- attributes ----

enum class Arm { down, forward, up };
enum class Legs { straight, squat, lunge };
enum class Torso { upright, lean_forward, lean_back };

struct AttributeTuple {
  Arm left_arm = Arm::down;
  Arm right_arm = Arm::down;
  Legs legs = Legs::straight;
  Torso torso = Torso::upright;

  bool operator==(const AttributeTuple& o) const {
    return left_arm == o.left_arm && right_arm == o.right_arm && legs == o.legs &&
           torso == o.torso;
  }
  bool operator!=(const AttributeTuple& o) const { return !(*this == o); }

  // Dense index in [0, 81).
  int index() const {
    return ((static_cast<int>(left_arm) * 3 + static_cast<int>(right_arm)) * 3 +
            static_cast<int>(legs)) * 3 +
           static_cast<int>(torso);
  }
};

inline const char* to_string(Arm a) {
  switch (a) {
    case Arm::down: return "down";
    case Arm::forward: return "forward";
    case Arm::up: return "up";
  }
  return "?";
}
inline const char* to_string(Legs l) {
  switch (l) {
    case Legs::straight: return "straight";
    case Legs::squat: return "squat";
    case Legs::lunge: return "lunge";
  }
  return "?";
}
inline const char* to_string(Torso t) {
  switch (t) {
    case Torso::upright: return "upright";
    case Torso::lean_forward: return "lean_forward";
    case Torso::lean_back: return "lean_back";
  }
  return "?";
}

inline Arm arm_from_string(const std::string& s) {
  if (s == "down") return Arm::down;
  if (s == "forward") return Arm::forward;
  if (s == "up") return Arm::up;
  throw ValidationError("unknown arm attribute: " + s);
}
inline Legs legs_from_string(const std::string& s) {
  if (s == "straight") return Legs::straight;
  if (s == "squat") return Legs::squat;
  if (s == "lunge") return Legs::lunge;
  throw ValidationError("unknown legs attribute: " + s);
}
inline Torso torso_from_string(const std::string& s) {
  if (s == "upright") return Torso::upright;
  if (s == "lean_forward") return Torso::lean_forward;
  if (s == "lean_back") return Torso::lean_back;
  throw ValidationError("unknown torso attribute: " + s);
}

inline AttributeTuple tuple_from_index(int idx) {
  check(idx >= 0 && idx < 81, "attribute tuple index out of range");
  AttributeTuple a;
  a.torso = static_cast<Torso>(idx % 3);
  idx /= 3;
  a.legs = static_cast<Legs>(idx % 3);
  idx /= 3;
  a.right_arm = static_cast<Arm>(idx % 3);
  idx /= 3;
  a.left_arm = static_cast<Arm>(idx % 3);
  return a;
}

inline std::vector<AttributeTuple> all_attribute_tuples() {
  std::vector<AttributeTuple> out;
  out.reserve(81);
  for (int i = 0; i < 81; ++i) out.push_back(tuple_from_index(i));
  return out;
}

inline nlohmann::json tuple_to_json(const AttributeTuple& a) {
  return nlohmann::json::array({to_string(a.left_arm), to_string(a.right_arm),
                                to_string(a.legs), to_string(a.torso)});
}

inline AttributeTuple tuple_from_json(const nlohmann::json& j) {
  check(j.is_array() && j.size() == 4, "attribute tuple must have 4 entries");
  AttributeTuple a;
  a.left_arm = arm_from_string(j[0].get<std::string>());
  a.right_arm = arm_from_string(j[1].get<std::string>());
  a.legs = legs_from_string(j[2].get<std::string>());
  a.torso = torso_from_string(j[3].get<std::string>());
  return a;
}

// ---- pose factory ----

namespace detail {

inline Mat3 rot_x(double deg) {
  return Mat3(Eigen::AngleAxisd(deg * M_PI / 180.0, Vec3::UnitX()));
}

}  // namespace detail

// Joint-angle table. Each attribute value touches only its own chain:
// arms rotate the shoulder, legs rotate hips and knees, torso rotates spine1.
inline void base_pose_rotations(const AttributeTuple& a, std::vector<Mat3>& local) {
  using detail::rot_x;
  // Indices follow default_skeleton() joint order.
  constexpr int kSpine1 = 1, kLShoulder = 4, kRShoulder = 7;
  constexpr int kLHip = 10, kLKnee = 11, kRHip = 13, kRKnee = 14;

  switch (a.left_arm) {
    case Arm::down: break;
    case Arm::forward: local[kLShoulder] = rot_x(-90.0); break;
    case Arm::up: local[kLShoulder] = rot_x(180.0); break;
  }
  switch (a.right_arm) {
    case Arm::down: break;
    case Arm::forward: local[kRShoulder] = rot_x(-90.0); break;
    case Arm::up: local[kRShoulder] = rot_x(180.0); break;
  }
  switch (a.legs) {
    case Legs::straight:
      break;
    case Legs::squat:
      local[kLHip] = rot_x(-60.0);
      local[kRHip] = rot_x(-60.0);
      local[kLKnee] = rot_x(90.0);
      local[kRKnee] = rot_x(90.0);
      break;
    case Legs::lunge:
      local[kLHip] = rot_x(-50.0);
      local[kLKnee] = rot_x(70.0);
      local[kRHip] = rot_x(25.0);
      local[kRKnee] = rot_x(15.0);
      break;
  }
  switch (a.torso) {
    case Torso::upright: break;
    case Torso::lean_forward: local[kSpine1] = rot_x(30.0); break;
    case Torso::lean_back: local[kSpine1] = rot_x(-25.0); break;
  }
}

inline constexpr double kNoiseMaxDeg = 12.0;

// Base pose from the angle table plus bounded per-joint angular noise:
// a random axis and an angle uniform in [-12, 12] degrees times noise_scale.
inline geo::Pose attributes_to_pose(const AttributeTuple& a, double noise_scale,
                                    std::uint64_t rng_seed,
                                    const geo::Skeleton& skeleton) {
  check(noise_scale >= 0.0, "attributes_to_pose: noise_scale must be >= 0");
  const auto J = static_cast<std::size_t>(skeleton.njoints());
  std::vector<Mat3> local(J, Mat3::Identity());
  base_pose_rotations(a, local);

  Rng rng(rng_seed, 0x706f7365ull);
  geo::Pose p;
  p.rot6d.resize(skeleton.njoints(), 6);
  for (std::size_t j = 0; j < J; ++j) {
    Mat3 r = local[j];
    if (noise_scale > 0.0) {
      Vec3 axis(rng.normal(), rng.normal(), rng.normal());
      while (axis.norm() < 1e-8) axis = Vec3(rng.normal(), rng.normal(), rng.normal());
      axis.normalize();
      const double angle =
          rng.uniform(-kNoiseMaxDeg, kNoiseMaxDeg) * noise_scale * M_PI / 180.0;
      r = r * Mat3(Eigen::AngleAxisd(angle, axis));
    } else {
      // Keep the stream position identical so noise_scale only scales angles.
      rng.normal();
      rng.normal();
      rng.normal();
      rng.uniform();
    }
    p.rot6d.row(static_cast<Eigen::Index>(j)) = geo::matrix_to_rot6d(r).transpose();
  }
  return p;
}

// ---- captions ----

struct Caption {
  std::vector<std::string> tokens;
  AttributeTuple attributes;

  std::string text() const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out += ' ';
      out += tokens[i];
    }
    return out;
  }
};

inline constexpr int kNumTemplates = 5;
inline constexpr int kMaxCaptionTokens = 77;

inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words = {
      "a",       "person",  "someone",  "figure",   "is",      "standing",
      "upright", "squatting", "crouching", "lunging", "in",    "lunge",
      "leaning", "bent",    "forward",  "back",     "backward", "with",
      "the",     "left",    "right",    "arm",      "arms",    "both",
      "raised",  "up",      "stretched", "reaching", "and"};
  return words;
}

inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    if (ch == ' ') {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  check(tokens.size() <= kMaxCaptionTokens, "caption exceeds the token limit");
  const auto& vocab = vocabulary();
  for (const auto& t : tokens) {
    check(std::find(vocab.begin(), vocab.end(), t) != vocab.end(),
          "unknown token: " + t);
  }
  return tokens;
}

namespace detail {

// Per-template phrase choices. Templates 0-2 are the training paraphrases;
// 3 and 4 reorder the chunks and are reserved as held-out paraphrases. No two
// templates produce the same text for the same tuple.
struct TemplateStyle {
  std::string subject;
  std::array<int, 3> order;  // chunk ids: 0 legs, 1 torso, 2 arms
  bool plain_synonyms;       // false switches to the second synonym set
  bool standing_filler;      // insert "standing" when only the arms differ
  std::string standing;      // full text for the all-default tuple
};

inline const std::array<TemplateStyle, kNumTemplates>& template_styles() {
  static const std::array<TemplateStyle, kNumTemplates> styles = {{
      {"a person", {0, 1, 2}, true, false, "a person standing"},
      {"someone is", {0, 1, 2}, false, true, "someone is standing"},
      {"a figure", {1, 0, 2}, true, false, "a figure standing upright"},
      {"a figure", {2, 0, 1}, false, false, "a figure standing"},
      {"someone", {0, 2, 1}, true, false, "someone standing"},
  }};
  return styles;
}

inline std::string legs_phrase(Legs legs, bool plain) {
  switch (legs) {
    case Legs::straight: return "";
    case Legs::squat: return plain ? "squatting" : "crouching";
    case Legs::lunge: return plain ? "lunging" : "in a lunge";
  }
  return "";
}

inline std::string torso_phrase(Torso torso, bool plain) {
  switch (torso) {
    case Torso::upright: return "";
    case Torso::lean_forward: return plain ? "leaning forward" : "bent forward";
    case Torso::lean_back: return plain ? "leaning back" : "bent backward";
  }
  return "";
}

inline std::string arm_value_phrase(Arm arm, bool plain) {
  switch (arm) {
    case Arm::down: return "";
    case Arm::up: return plain ? "raised" : "up";
    case Arm::forward: return plain ? "stretched forward" : "reaching forward";
  }
  return "";
}

inline std::string arms_phrase(const AttributeTuple& a, bool plain) {
  if (a.left_arm == Arm::down && a.right_arm == Arm::down) return "";
  if (a.left_arm == a.right_arm) {
    return "with both arms " + arm_value_phrase(a.left_arm, plain);
  }
  std::string out = "with";
  bool first = true;
  if (a.left_arm != Arm::down) {
    out += " the left arm " + arm_value_phrase(a.left_arm, plain);
    first = false;
  }
  if (a.right_arm != Arm::down) {
    if (!first) out += " and";
    out += " the right arm " + arm_value_phrase(a.right_arm, plain);
  }
  return out;
}

}  // namespace detail

// The text is a deterministic function of (attributes, template_id); the seed
// parameter is accepted for interface symmetry with the other factories.
inline Caption attributes_to_caption(const AttributeTuple& a, int template_id,
                                     std::uint64_t rng_seed = 0) {
  (void)rng_seed;
  check(template_id >= 0 && template_id < kNumTemplates,
        "attributes_to_caption: unknown template id " + std::to_string(template_id));
  const auto& style = detail::template_styles()[static_cast<std::size_t>(template_id)];

  const AttributeTuple defaults{};
  std::string text;
  if (a == defaults) {
    text = style.standing;
  } else {
    std::array<std::string, 3> chunk;
    chunk[0] = detail::legs_phrase(a.legs, style.plain_synonyms);
    chunk[1] = detail::torso_phrase(a.torso, style.plain_synonyms);
    chunk[2] = detail::arms_phrase(a, style.plain_synonyms);
    if (style.standing_filler && chunk[0].empty() && chunk[1].empty()) {
      chunk[0] = "standing";
    }
    text = style.subject;
    for (int id : style.order) {
      if (!chunk[static_cast<std::size_t>(id)].empty()) {
        text += " " + chunk[static_cast<std::size_t>(id)];
      }
    }
  }

  Caption cap;
  cap.tokens = tokenize(text);
  cap.attributes = a;
  return cap;
}

// Keyword parser inverting attributes_to_caption for every template.
inline AttributeTuple caption_to_attributes(const std::vector<std::string>& tokens) {
  auto has_phrase = [&tokens](std::initializer_list<const char*> phrase) {
    const std::size_t n = phrase.size();
    if (tokens.size() < n) return false;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      bool ok = true;
      std::size_t k = 0;
      for (const char* w : phrase) {
        if (tokens[i + k] != w) {
          ok = false;
          break;
        }
        ++k;
      }
      if (ok) return true;
    }
    return false;
  };

  AttributeTuple a;
  if (has_phrase({"squatting"}) || has_phrase({"crouching"})) {
    a.legs = Legs::squat;
  } else if (has_phrase({"lunging"}) || has_phrase({"in", "a", "lunge"})) {
    a.legs = Legs::lunge;
  }

  if (has_phrase({"leaning", "forward"}) || has_phrase({"bent", "forward"})) {
    a.torso = Torso::lean_forward;
  } else if (has_phrase({"leaning", "back"}) || has_phrase({"bent", "backward"})) {
    a.torso = Torso::lean_back;
  }

  if (has_phrase({"both", "arms", "raised"}) || has_phrase({"both", "arms", "up"})) {
    a.left_arm = a.right_arm = Arm::up;
  } else if (has_phrase({"both", "arms", "stretched", "forward"}) ||
             has_phrase({"both", "arms", "reaching", "forward"})) {
    a.left_arm = a.right_arm = Arm::forward;
  } else {
    if (has_phrase({"left", "arm", "raised"}) || has_phrase({"left", "arm", "up"})) {
      a.left_arm = Arm::up;
    } else if (has_phrase({"left", "arm", "stretched", "forward"}) ||
               has_phrase({"left", "arm", "reaching", "forward"})) {
      a.left_arm = Arm::forward;
    }
    if (has_phrase({"right", "arm", "raised"}) || has_phrase({"right", "arm", "up"})) {
      a.right_arm = Arm::up;
    } else if (has_phrase({"right", "arm", "stretched", "forward"}) ||
               has_phrase({"right", "arm", "reaching", "forward"})) {
      a.right_arm = Arm::forward;
    }
  }
  return a;
}

inline AttributeTuple caption_to_attributes(const std::string& text) {
  return caption_to_attributes(tokenize(text));
}

// ---- motions ----

enum class MotionStyle { hold, transition, oscillate };

inline const char* to_string(MotionStyle s) {
  switch (s) {
    case MotionStyle::hold: return "hold";
    case MotionStyle::transition: return "transition";
    case MotionStyle::oscillate: return "oscillate";
  }
  return "?";
}

inline MotionStyle style_from_string(const std::string& s) {
  if (s == "hold") return MotionStyle::hold;
  if (s == "transition") return MotionStyle::transition;
  if (s == "oscillate") return MotionStyle::oscillate;
  throw ValidationError("unknown motion style: " + s);
}

struct MotionClip {
  geo::Motion motion;
  std::optional<Caption> caption;
};

struct MotionParams {
  Eigen::Index frames = 60;
  double fps = 30.0;
  double noise_scale = 1.0;
  double gait_hz = 1.0;
  double gait_amp_deg = 10.0;
};

inline void validate_clip(const MotionClip& clip, const geo::Skeleton& skeleton,
                          Eigen::Index expected_frames) {
  geo::validate_motion(clip.motion, skeleton);
  check(clip.motion.frames.rows() == expected_frames,
        "motion clip: expected exactly " + std::to_string(expected_frames) + " frames");
}

// hold: one noisy start pose repeated. transition: per-joint quaternion slerp
// from start to end with smoothstep easing. oscillate: the transition plus an
// antiphase sinusoidal swing on hips and knees at gait_hz.
inline MotionClip synth_motion(const AttributeTuple& a_start,
                               const AttributeTuple& a_end, MotionStyle style,
                               std::uint64_t rng_seed, const geo::Skeleton& skeleton,
                               const MotionParams& params = {}) {
  check(params.frames > 0, "synth_motion: frames must be positive");
  check(params.fps > 0.0, "synth_motion: fps must be positive");
  const Eigen::Index T = params.frames;
  const Eigen::Index J = skeleton.njoints();

  const geo::Pose start =
      attributes_to_pose(a_start, params.noise_scale, rng_seed * 2 + 1, skeleton);
  const geo::Pose end =
      attributes_to_pose(a_end, params.noise_scale, rng_seed * 2 + 2, skeleton);

  MotionClip clip;
  clip.motion.fps = params.fps;
  clip.motion.frames.resize(T, J * 6);

  if (style == MotionStyle::hold) {
    const auto row = geo::flatten_pose(start);
    for (Eigen::Index t = 0; t < T; ++t) clip.motion.frames.row(t) = row;
    return clip;
  }

  std::vector<Eigen::Quaterniond> qa(static_cast<std::size_t>(J));
  std::vector<Eigen::Quaterniond> qb(static_cast<std::size_t>(J));
  for (Eigen::Index j = 0; j < J; ++j) {
    qa[static_cast<std::size_t>(j)] =
        Eigen::Quaterniond(geo::rot6d_to_matrix(start.rot6d.row(j).transpose()));
    qb[static_cast<std::size_t>(j)] =
        Eigen::Quaterniond(geo::rot6d_to_matrix(end.rot6d.row(j).transpose()));
  }

  constexpr int kLHip = 10, kLKnee = 11, kRHip = 13, kRKnee = 14;
  const double amp = params.gait_amp_deg * M_PI / 180.0;

  for (Eigen::Index t = 0; t < T; ++t) {
    const double u = T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
    const double eased = u * u * (3.0 - 2.0 * u);
    for (Eigen::Index j = 0; j < J; ++j) {
      const auto js = static_cast<std::size_t>(j);
      Mat3 r(qa[js].slerp(eased, qb[js]));
      if (style == MotionStyle::oscillate) {
        const double phase =
            2.0 * M_PI * params.gait_hz * static_cast<double>(t) / params.fps;
        double swing = 0.0;
        if (j == kLHip) swing = amp * 0.8 * std::sin(phase);
        if (j == kRHip) swing = -amp * 0.8 * std::sin(phase);
        if (j == kLKnee) swing = amp * std::sin(phase);
        if (j == kRKnee) swing = -amp * std::sin(phase);
        if (swing != 0.0) r = r * Mat3(Eigen::AngleAxisd(swing, Vec3::UnitX()));
      }
      clip.motion.frames.block(t, j * 6, 1, 6) = geo::matrix_to_rot6d(r).transpose();
    }
  }
  return clip;
}

// ---- dataset persistence ----

namespace detail {

inline void append_double(std::string& out, double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

inline void append_double_array(std::string& out, const double* p, std::size_t n) {
  out += '[';
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += ',';
    append_double(out, p[i]);
  }
  out += ']';
}

// Parses the JSON number array that starts at text[pos] (a '[') into dst.
inline void parse_double_array(const std::string& text, std::size_t& pos, double* dst,
                               std::size_t n) {
  while (pos < text.size() && text[pos] == ' ') ++pos;
  check_io(pos < text.size() && text[pos] == '[', "dataset: expected number array");
  ++pos;
  for (std::size_t i = 0; i < n; ++i) {
    while (pos < text.size() && (text[pos] == ',' || text[pos] == ' ')) ++pos;
    const char* begin = text.data() + pos;
    double v = 0.0;
    auto res = std::from_chars(begin, text.data() + text.size(), v);
    check_io(res.ec == std::errc(), "dataset: malformed number");
    dst[i] = v;
    pos = static_cast<std::size_t>(res.ptr - text.data());
  }
  while (pos < text.size() && text[pos] == ' ') ++pos;
  check_io(pos < text.size() && text[pos] == ']', "dataset: number array too long");
  ++pos;
}

// Rows are flattened pose or frame blocks serialized with to_chars, which is
// both fast and shortest-round-trip exact.
inline std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

// Locates "key":<value> at the top level of a JSONL record.
inline std::size_t find_key(const std::string& line, const std::string& key) {
  const std::string needle = "\"" + key + "\":";
  const auto pos = line.find(needle);
  check_io(pos != std::string::npos, "dataset: record missing field '" + key + "'");
  return pos + needle.size();
}

}  // namespace detail

struct PoseRecord {
  std::int64_t id = 0;
  AttributeTuple tuple;
  Eigen::RowVectorXd rot6d;
};

struct PairRecord {
  std::int64_t id = 0;
  int template_id = 0;
  Caption caption;
  Eigen::RowVectorXd rot6d;
};

struct MotionRecord {
  std::int64_t id = 0;
  MotionStyle style = MotionStyle::hold;
  AttributeTuple start;
  AttributeTuple end;
  Mat frames;
};

struct DatasetConfig {
  Eigen::Index n_poses = 4096;
  Eigen::Index n_pairs = 2048;
  Eigen::Index n_motions = 2048;
  int heldout_tuples = 64;
  double noise_scale = 1.0;
  double gait_hz = 1.0;
  Eigen::Index frames = 60;
  double fps = 30.0;
  std::vector<int> train_templates = {0, 1, 2};
  std::vector<int> heldout_templates = {3, 4};

  void validate() const {
    check_config(n_poses >= 4096, "dataset: pose set must have at least 4096 entries");
    check_config(n_pairs >= 2048, "dataset: pair set must have at least 2048 entries");
    check_config(n_motions >= 2048, "dataset: motion set must have at least 2048 entries");
    check_config(heldout_tuples >= 1 && heldout_tuples <= 77,
                 "dataset: heldout_tuples must leave at least 4 training tuples");
    check_config(noise_scale >= 0.0, "dataset: noise_scale must be >= 0");
    check_config(gait_hz > 0.0, "dataset: gait_hz must be positive");
    check_config(frames > 0 && fps > 0.0, "dataset: bad clip geometry");
    check_config(!train_templates.empty(), "dataset: no training templates");
    auto in_range = [](int t) { return t >= 0 && t < kNumTemplates; };
    for (int t : train_templates) check_config(in_range(t), "dataset: bad template id");
    for (int t : heldout_templates) check_config(in_range(t), "dataset: bad template id");
    for (int t : train_templates) {
      check_config(std::find(heldout_templates.begin(), heldout_templates.end(), t) ==
                       heldout_templates.end(),
                   "dataset: template cannot be both train and held out");
    }
  }

  std::string digest() const {
    nlohmann::json j{{"n_poses", n_poses},
                     {"n_pairs", n_pairs},
                     {"n_motions", n_motions},
                     {"heldout_tuples", heldout_tuples},
                     {"noise_scale", noise_scale},
                     {"gait_hz", gait_hz},
                     {"frames", frames},
                     {"fps", fps},
                     {"train_templates", train_templates},
                     {"heldout_templates", heldout_templates}};
    return hex64(fnv1a64(j.dump()));
  }
};

struct DatasetManifest {
  int schema_version = 1;
  std::uint64_t seed = 0;
  std::string config_digest;
  DatasetConfig config;
  std::vector<AttributeTuple> train_tuples;
  std::vector<AttributeTuple> heldout_tuples;
  std::filesystem::path root;
  std::string poses_file = "poses.jsonl";
  std::string pairs_file = "pairs.jsonl";
  std::string motions_file = "motions.jsonl";
  std::string heldout_file = "heldout.jsonl";
};

// Deterministic split of the 81 tuples. The all-default tuple always trains;
// remaining training slots are picked greedily so that every attribute value
// keeps appearing in the training set.
inline void split_tuples(int heldout_count, std::uint64_t seed,
                         std::vector<AttributeTuple>& train,
                         std::vector<AttributeTuple>& heldout) {
  auto tuples = all_attribute_tuples();
  Rng rng(seed, 0x73706c69ull);
  rng.shuffle(tuples);

  const int train_count = 81 - heldout_count;
  std::map<std::string, int> counts;
  auto value_keys = [](const AttributeTuple& a) {
    return std::array<std::string, 4>{std::string("l:") + to_string(a.left_arm),
                                      std::string("r:") + to_string(a.right_arm),
                                      std::string("g:") + to_string(a.legs),
                                      std::string("t:") + to_string(a.torso)};
  };

  train.clear();
  heldout.clear();
  std::vector<bool> taken(tuples.size(), false);
  auto take = [&](std::size_t i) {
    taken[i] = true;
    train.push_back(tuples[i]);
    for (const auto& k : value_keys(tuples[i])) counts[k]++;
  };

  const AttributeTuple defaults{};
  for (std::size_t i = 0; i < tuples.size(); ++i) {
    if (tuples[i] == defaults) {
      take(i);
      break;
    }
  }
  while (static_cast<int>(train.size()) < train_count) {
    int best_score = -1;
    std::size_t best = 0;
    for (std::size_t i = 0; i < tuples.size(); ++i) {
      if (taken[i]) continue;
      int score = 0;
      for (const auto& k : value_keys(tuples[i])) {
        score += std::max(0, 4 - counts[k]);
      }
      if (score > best_score) {
        best_score = score;
        best = i;
      }
    }
    take(best);
  }
  for (std::size_t i = 0; i < tuples.size(); ++i) {
    if (!taken[i]) heldout.push_back(tuples[i]);
  }
}

inline DatasetManifest build_dataset(const DatasetConfig& config,
                                     const geo::Skeleton& skeleton,
                                     std::uint64_t seed,
                                     const std::filesystem::path& out_dir) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  check_io(!ec && std::filesystem::is_directory(out_dir),
           "dataset: cannot create output directory " + out_dir.string());

  DatasetManifest man;
  man.seed = seed;
  man.config = config;
  man.config_digest = config.digest();
  man.root = out_dir;
  split_tuples(config.heldout_tuples, seed, man.train_tuples, man.heldout_tuples);

  const Eigen::Index J = skeleton.njoints();
  const auto all = all_attribute_tuples();

  // poses.jsonl: attribute-conditioned pose samples over every tuple.
  {
    std::string out;
    out.reserve(static_cast<std::size_t>(config.n_poses) * 1200);
    Rng rng(seed, 0x01);
    for (Eigen::Index i = 0; i < config.n_poses; ++i) {
      const AttributeTuple& tup = all[rng.index(all.size())];
      const geo::Pose p = attributes_to_pose(tup, config.noise_scale, rng.bits(), skeleton);
      out += "{\"id\":" + std::to_string(i) + ",\"tuple\":" + tuple_to_json(tup).dump() +
             ",\"rot6d\":";
      const auto row = geo::flatten_pose(p);
      detail::append_double_array(out, row.data(), static_cast<std::size_t>(row.size()));
      out += "}\n";
    }
    write_text_file(out_dir / man.poses_file, out);
  }

  // pairs.jsonl: caption-pose pairs over training tuples and templates only.
  {
    std::string out;
    out.reserve(static_cast<std::size_t>(config.n_pairs) * 1300);
    Rng rng(seed, 0x02);
    for (Eigen::Index i = 0; i < config.n_pairs; ++i) {
      const AttributeTuple& tup = man.train_tuples[rng.index(man.train_tuples.size())];
      const int tid = config.train_templates[rng.index(config.train_templates.size())];
      const Caption cap = attributes_to_caption(tup, tid, rng.bits());
      const geo::Pose p = attributes_to_pose(tup, config.noise_scale, rng.bits(), skeleton);
      out += "{\"id\":" + std::to_string(i) + ",\"template\":" + std::to_string(tid) +
             ",\"caption\":\"" + detail::json_escape(cap.text()) + "\",\"tuple\":" +
             tuple_to_json(tup).dump() + ",\"rot6d\":";
      const auto row = geo::flatten_pose(p);
      detail::append_double_array(out, row.data(), static_cast<std::size_t>(row.size()));
      out += "}\n";
    }
    write_text_file(out_dir / man.pairs_file, out);
  }

  // motions.jsonl: text-free clips over every tuple, styles cycled evenly.
  {
    std::string out;
    out.reserve(static_cast<std::size_t>(config.n_motions) * 1024 * 60);
    Rng rng(seed, 0x03);
    MotionParams mp;
    mp.frames = config.frames;
    mp.fps = config.fps;
    mp.noise_scale = config.noise_scale;
    mp.gait_hz = config.gait_hz;
    const MotionStyle styles[3] = {MotionStyle::hold, MotionStyle::transition,
                                   MotionStyle::oscillate};
    for (Eigen::Index i = 0; i < config.n_motions; ++i) {
      const MotionStyle style = styles[i % 3];
      const AttributeTuple& s = all[rng.index(all.size())];
      const AttributeTuple& e = all[rng.index(all.size())];
      const MotionClip clip = synth_motion(s, e, style, rng.bits(), skeleton, mp);
      out += "{\"id\":" + std::to_string(i) + ",\"style\":\"" + to_string(style) +
             "\",\"start\":" + tuple_to_json(s).dump() + ",\"end\":" +
             tuple_to_json(e).dump() + ",\"frames\":";
      const Mat by_frame = clip.motion.frames.transpose();  // columns are frames
      detail::append_double_array(out, by_frame.data(),
                                  static_cast<std::size_t>(by_frame.size()));
      out += "}\n";
    }
    write_text_file(out_dir / man.motions_file, out);
  }

  // heldout.jsonl: every held-out tuple rendered with every template.
  {
    std::string out;
    Rng rng(seed, 0x04);
    std::int64_t id = 0;
    for (const AttributeTuple& tup : man.heldout_tuples) {
      for (int tid = 0; tid < kNumTemplates; ++tid) {
        const Caption cap = attributes_to_caption(tup, tid, rng.bits());
        const geo::Pose p =
            attributes_to_pose(tup, config.noise_scale, rng.bits(), skeleton);
        out += "{\"id\":" + std::to_string(id++) + ",\"template\":" +
               std::to_string(tid) + ",\"caption\":\"" +
               detail::json_escape(cap.text()) + "\",\"tuple\":" +
               tuple_to_json(tup).dump() + ",\"rot6d\":";
        const auto row = geo::flatten_pose(p);
        detail::append_double_array(out, row.data(), static_cast<std::size_t>(row.size()));
        out += "}\n";
      }
    }
    write_text_file(out_dir / man.heldout_file, out);
  }

  // manifest.json last, so its presence implies a complete dataset.
  {
    nlohmann::json tuples_train = nlohmann::json::array();
    for (const auto& t : man.train_tuples) tuples_train.push_back(tuple_to_json(t));
    nlohmann::json tuples_held = nlohmann::json::array();
    for (const auto& t : man.heldout_tuples) tuples_held.push_back(tuple_to_json(t));
    nlohmann::json doc{
        {"schema_version", man.schema_version},
        {"seed", seed},
        {"pose_dim", J * 6},
        {"config_digest", man.config_digest},
        {"counts",
         {{"poses", config.n_poses}, {"pairs", config.n_pairs},
          {"motions", config.n_motions},
          {"heldout_captions", static_cast<int>(man.heldout_tuples.size()) * kNumTemplates}}},
        {"files",
         {{"poses", man.poses_file}, {"pairs", man.pairs_file},
          {"motions", man.motions_file}, {"heldout", man.heldout_file}}},
        {"config",
         {{"n_poses", config.n_poses}, {"n_pairs", config.n_pairs},
          {"n_motions", config.n_motions}, {"heldout_tuples", config.heldout_tuples},
          {"noise_scale", config.noise_scale}, {"gait_hz", config.gait_hz},
          {"frames", config.frames}, {"fps", config.fps},
          {"train_templates", config.train_templates},
          {"heldout_templates", config.heldout_templates}}},
        {"train_tuples", tuples_train},
        {"heldout_tuples", tuples_held}};
    write_text_file(out_dir / "manifest.json", doc.dump(2) + "\n");
  }
  return man;
}

struct Dataset {
  DatasetManifest manifest;
  std::vector<PoseRecord> poses;
  std::vector<PairRecord> pairs;
  std::vector<MotionRecord> motions;
  std::vector<PairRecord> heldout;  // held-out captions with sample poses

  // Pose rows stacked into an N x (J*6) matrix.
  Mat pose_matrix() const {
    check(!poses.empty(), "dataset: no poses");
    Mat m(static_cast<Eigen::Index>(poses.size()), poses[0].rot6d.size());
    for (std::size_t i = 0; i < poses.size(); ++i) {
      m.row(static_cast<Eigen::Index>(i)) = poses[i].rot6d;
    }
    return m;
  }
};

namespace detail {

inline void for_each_line(const std::string& text,
                          const std::function<void(const std::string&)>& fn) {
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    if (end > start) fn(text.substr(start, end - start));
    start = end + 1;
  }
}

inline std::string parse_string_field(const std::string& line, const std::string& key) {
  std::size_t pos = find_key(line, key);
  check_io(pos < line.size() && line[pos] == '"', "dataset: expected string field");
  ++pos;
  std::string out;
  while (pos < line.size() && line[pos] != '"') {
    if (line[pos] == '\\' && pos + 1 < line.size()) ++pos;
    out += line[pos++];
  }
  return out;
}

inline std::int64_t parse_int_field(const std::string& line, const std::string& key) {
  const std::size_t pos = find_key(line, key);
  std::int64_t v = 0;
  auto res = std::from_chars(line.data() + pos, line.data() + line.size(), v);
  check_io(res.ec == std::errc(), "dataset: malformed integer field '" + key + "'");
  return v;
}

inline AttributeTuple parse_tuple_field(const std::string& line, const std::string& key) {
  std::size_t pos = find_key(line, key);
  const std::size_t end = line.find(']', pos);
  check_io(end != std::string::npos, "dataset: malformed tuple field");
  nlohmann::json j = nlohmann::json::parse(line.substr(pos, end - pos + 1), nullptr, false);
  check_io(!j.is_discarded(), "dataset: malformed tuple field");
  return tuple_from_json(j);
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  nlohmann::json doc = nlohmann::json::parse(read_text_file(dir / "manifest.json"),
                                             nullptr, false);
  check_io(!doc.is_discarded(), "dataset: malformed manifest.json");
  check_io(doc.value("schema_version", 0) == 1, "dataset: unsupported manifest schema");

  DatasetManifest& man = ds.manifest;
  man.schema_version = 1;
  man.seed = doc.at("seed").get<std::uint64_t>();
  man.config_digest = doc.at("config_digest").get<std::string>();
  man.root = dir;
  const auto& cfg = doc.at("config");
  man.config.n_poses = cfg.at("n_poses").get<Eigen::Index>();
  man.config.n_pairs = cfg.at("n_pairs").get<Eigen::Index>();
  man.config.n_motions = cfg.at("n_motions").get<Eigen::Index>();
  man.config.heldout_tuples = cfg.at("heldout_tuples").get<int>();
  man.config.noise_scale = cfg.at("noise_scale").get<double>();
  man.config.gait_hz = cfg.at("gait_hz").get<double>();
  man.config.frames = cfg.at("frames").get<Eigen::Index>();
  man.config.fps = cfg.at("fps").get<double>();
  man.config.train_templates = cfg.at("train_templates").get<std::vector<int>>();
  man.config.heldout_templates = cfg.at("heldout_templates").get<std::vector<int>>();
  for (const auto& t : doc.at("train_tuples")) man.train_tuples.push_back(tuple_from_json(t));
  for (const auto& t : doc.at("heldout_tuples")) man.heldout_tuples.push_back(tuple_from_json(t));

  const auto& files = doc.at("files");
  man.poses_file = files.at("poses").get<std::string>();
  man.pairs_file = files.at("pairs").get<std::string>();
  man.motions_file = files.at("motions").get<std::string>();
  man.heldout_file = files.at("heldout").get<std::string>();

  const auto pose_dim = doc.at("pose_dim").get<Eigen::Index>();
  check_io(pose_dim > 0 && pose_dim % 6 == 0, "dataset: bad pose_dim");

  {
    const std::string text = read_text_file(dir / man.poses_file);
    ds.poses.reserve(static_cast<std::size_t>(man.config.n_poses));
    detail::for_each_line(text, [&](const std::string& line) {
      PoseRecord rec;
      rec.id = detail::parse_int_field(line, "id");
      rec.tuple = detail::parse_tuple_field(line, "tuple");
      rec.rot6d.resize(pose_dim);
      std::size_t pos = detail::find_key(line, "rot6d");
      detail::parse_double_array(line, pos, rec.rot6d.data(),
                                 static_cast<std::size_t>(pose_dim));
      ds.poses.push_back(std::move(rec));
    });
    check_io(static_cast<Eigen::Index>(ds.poses.size()) == man.config.n_poses,
             "dataset: pose count does not match manifest");
  }

  auto load_pairs = [&](const std::string& file, std::vector<PairRecord>& out,
                        Eigen::Index expected) {
    const std::string text = read_text_file(dir / file);
    detail::for_each_line(text, [&](const std::string& line) {
      PairRecord rec;
      rec.id = detail::parse_int_field(line, "id");
      rec.template_id = static_cast<int>(detail::parse_int_field(line, "template"));
      rec.caption.tokens = tokenize(detail::parse_string_field(line, "caption"));
      rec.caption.attributes = detail::parse_tuple_field(line, "tuple");
      rec.rot6d.resize(pose_dim);
      std::size_t pos = detail::find_key(line, "rot6d");
      detail::parse_double_array(line, pos, rec.rot6d.data(),
                                 static_cast<std::size_t>(pose_dim));
      out.push_back(std::move(rec));
    });
    check_io(expected < 0 || static_cast<Eigen::Index>(out.size()) == expected,
             "dataset: record count does not match manifest for " + file);
  };
  load_pairs(man.pairs_file, ds.pairs, man.config.n_pairs);
  load_pairs(man.heldout_file, ds.heldout,
             static_cast<Eigen::Index>(man.heldout_tuples.size()) * kNumTemplates);

  {
    const std::string text = read_text_file(dir / man.motions_file);
    ds.motions.reserve(static_cast<std::size_t>(man.config.n_motions));
    const Eigen::Index T = man.config.frames;
    detail::for_each_line(text, [&](const std::string& line) {
      MotionRecord rec;
      rec.id = detail::parse_int_field(line, "id");
      rec.style = style_from_string(detail::parse_string_field(line, "style"));
      rec.start = detail::parse_tuple_field(line, "start");
      rec.end = detail::parse_tuple_field(line, "end");
      Mat buf(pose_dim, T);  // transposed: column t holds frame t
      std::size_t pos = detail::find_key(line, "frames");
      detail::parse_double_array(line, pos, buf.data(),
                                 static_cast<std::size_t>(buf.size()));
      rec.frames = buf.transpose();
      ds.motions.push_back(std::move(rec));
    });
    check_io(static_cast<Eigen::Index>(ds.motions.size()) == man.config.n_motions,
             "dataset: motion count does not match manifest");
  }
  return ds;
}

}  // namespace mogen::domain
