#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "vdial/dialog.hpp"
#include "vdial/encoders.hpp"
#include "vdial/media.hpp"
#include "vdial/rng.hpp"

namespace vdial::synth {

inline constexpr std::array<const char*, 5> kRooms = {"kitchen", "bedroom", "garage", "office", "bathroom"};
inline constexpr std::array<std::array<float, 3>, 5> kRoomColors = {{
    {0.85F, 0.80F, 0.55F},
    {0.55F, 0.65F, 0.85F},
    {0.50F, 0.50F, 0.50F},
    {0.70F, 0.88F, 0.70F},
    {0.90F, 0.72F, 0.85F},
}};

inline constexpr std::array<const char*, 8> kActorColors = {"red",    "green",  "blue",  "yellow",
                                                            "purple", "orange", "black", "brown"};
inline constexpr std::array<std::array<float, 3>, 8> kActorRgb = {{
    {0.90F, 0.10F, 0.10F},
    {0.10F, 0.65F, 0.10F},
    {0.10F, 0.20F, 0.90F},
    {0.95F, 0.90F, 0.10F},
    {0.55F, 0.10F, 0.70F},
    {1.00F, 0.55F, 0.00F},
    {0.05F, 0.05F, 0.05F},
    {0.50F, 0.30F, 0.10F},
}};

inline constexpr std::array<const char*, 6> kObjects = {"cup", "book", "ball", "box", "lamp", "shoe"};
inline constexpr std::array<const char*, 6> kObjectColors = {"white", "teal", "pink", "tan", "cyan", "navy"};
inline constexpr std::array<std::array<float, 3>, 6> kObjectRgb = {{
    {1.00F, 1.00F, 1.00F},
    {0.00F, 0.60F, 0.60F},
    {1.00F, 0.00F, 1.00F},
    {0.80F, 0.60F, 0.40F},
    {0.40F, 0.90F, 1.00F},
    {0.10F, 0.10F, 0.40F},
}};

/// Places an actor can walk to; the door is only used to enter and leave.
inline constexpr std::array<const char*, 6> kPlaces = {"window", "table", "corner", "shelf", "bed", "sofa"};

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

inline constexpr std::array<Point, 6> kPlaceCells = {{{16, 5}, {16, 16}, {27, 27}, {27, 5}, {5, 27}, {16, 27}}};
inline constexpr Point kDoorInside{6, 16};
inline constexpr Point kDoorOutside{-4, 16};
inline constexpr double kTimeline = 48.0;

enum class EventType { Enter, Pick, MoveTo, PutDown, Exit };

inline const char* to_string(EventType t) {
  switch (t) {
    case EventType::Enter: return "enter";
    case EventType::Pick: return "pick_object";
    case EventType::MoveTo: return "move_to";
    case EventType::PutDown: return "put_down";
    case EventType::Exit: return "exit";
  }
  return "?";
}

struct Event {
  EventType type = EventType::Enter;
  int object = -1;  // index into WorldTrace::objects
  int place = -1;   // index into kPlaces
  double start = 0.0;
  double end = 0.0;
  Point from;
  Point to;

  friend bool operator==(const Event&, const Event&) = default;
};

struct SceneObject {
  int kind = 0;  // index into kObjects
  Point position;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct WorldTrace {
  std::uint64_t seed = 0;
  int grid_size = 32;
  int room = 0;
  bool woman = false;
  int actor_color = 0;
  std::array<SceneObject, 2> objects{};
  std::vector<Event> events;

  const char* pronoun() const { return woman ? "she" : "he"; }

  friend bool operator==(const WorldTrace&, const WorldTrace&) = default;
};

/// enter, pick(first object), then 1–4 of move_to / put_down / pick(other)
/// with an optional final exit; 3–6 events laid out over 48 ticks.
inline WorldTrace generate_world_trace(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x7A4CE));
  WorldTrace w;
  w.seed = seed;
  w.room = static_cast<int>(rng.below(kRooms.size()));
  w.woman = rng.bernoulli(0.5);
  w.actor_color = static_cast<int>(rng.below(kActorColors.size()));
  const int first_kind = static_cast<int>(rng.below(kObjects.size()));
  int second_kind = static_cast<int>(rng.below(kObjects.size() - 1));
  if (second_kind >= first_kind) ++second_kind;
  auto spot = [&] { return Point{8.0 + 4.0 * static_cast<double>(rng.below(5)), 8.0 + 4.0 * static_cast<double>(rng.below(5))}; };
  w.objects[0] = {first_kind, spot()};
  do {
    w.objects[1] = {second_kind, spot()};
  } while (std::abs(w.objects[1].position.x - w.objects[0].position.x) +
               std::abs(w.objects[1].position.y - w.objects[0].position.y) <
           8.0);

  Point here = kDoorInside;
  std::vector<Event> events;
  events.push_back({EventType::Enter, -1, -1, 0, 0, kDoorOutside, kDoorInside});
  events.push_back({EventType::Pick, 0, -1, 0, 0, here, w.objects[0].position});
  here = w.objects[0].position;
  int holding = 0;
  bool picked_other = false;
  int place = -1;
  const auto extra = static_cast<int>(rng.between(1, 4));
  for (int j = 0; j < extra; ++j) {
    if (j == extra - 1 && rng.bernoulli(0.35)) {
      events.push_back({EventType::Exit, -1, -1, 0, 0, here, kDoorOutside});
      break;
    }
    std::vector<EventType> options{EventType::MoveTo};
    if (holding >= 0) options.push_back(EventType::PutDown);
    if (holding < 0 && !picked_other) options.push_back(EventType::Pick);
    const EventType type = options[rng.below(options.size())];
    if (type == EventType::MoveTo) {
      int next = static_cast<int>(rng.below(kPlaces.size() - (place >= 0 ? 1 : 0)));
      if (place >= 0 && next >= place) ++next;
      place = next;
      const Point target = kPlaceCells[static_cast<std::size_t>(place)];
      events.push_back({EventType::MoveTo, holding, place, 0, 0, here, target});
      here = target;
    } else if (type == EventType::PutDown) {
      events.push_back({EventType::PutDown, holding, -1, 0, 0, here, here});
      holding = -1;
    } else {
      events.push_back({EventType::Pick, 1, -1, 0, 0, here, w.objects[1].position});
      here = w.objects[1].position;
      holding = 1;
      picked_other = true;
      place = -1;
    }
  }

  std::vector<double> durations;
  double total = 0.0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    durations.push_back(static_cast<double>(rng.between(4, 12)));
    total += durations.back();
  }
  const double usable = kTimeline - 2.0;
  const double factor = total > usable ? usable / total : 1.0;
  double t = 1.0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    events[i].start = t;
    t += durations[i] * factor;
    events[i].end = t;
  }
  w.events = std::move(events);
  return w;
}

/// Scene state at continuous time `t` (ticks).
struct SceneState {
  bool actor_visible = false;
  Point actor;
  std::array<bool, 2> held{};
  std::array<Point, 2> objects{};
};

inline SceneState scene_at(const WorldTrace& w, double t) {
  SceneState s;
  for (std::size_t i = 0; i < 2; ++i) s.objects[i] = w.objects[i].position;
  if (w.events.empty() || t < w.events.front().start) return s;
  s.actor_visible = true;
  for (const Event& e : w.events) {
    if (t < e.start) break;
    const double u = std::clamp((t - e.start) / (e.end - e.start), 0.0, 1.0);
    s.actor = {e.from.x + (e.to.x - e.from.x) * u, e.from.y + (e.to.y - e.from.y) * u};
    const bool done = t >= e.end;
    if (e.type == EventType::Pick && done) s.held[static_cast<std::size_t>(e.object)] = true;
    if (e.type == EventType::PutDown && done) {
      const auto o = static_cast<std::size_t>(e.object);
      s.held[o] = false;
      s.objects[o] = {e.to.x + 5.0, e.to.y};
    }
    if (e.type == EventType::Exit && done) s.actor_visible = false;
  }
  for (std::size_t i = 0; i < 2; ++i)
    if (s.held[i]) s.objects[i] = {s.actor.x + 4.0, s.actor.y - 4.0};
  return s;
}

namespace detail {

inline void paint(VideoClip& clip, std::size_t f, int x, int y, const std::array<float, 3>& rgb) {
  if (x < 0 || y < 0 || x >= static_cast<int>(clip.width) || y >= static_cast<int>(clip.height)) return;
  const std::size_t base = ((f * clip.height + static_cast<std::size_t>(y)) * clip.width + static_cast<std::size_t>(x)) * 3;
  for (std::size_t c = 0; c < 3; ++c) clip.pixels[base + c] = rgb[c];
}

}  // namespace detail

/// Frame i samples tick (i + 0.5)·48/n. Objects are 4×4 squares, the actor a
/// 6×6 square (man) or diamond (woman), drawn over the room's background.
inline VideoClip render_frames(const WorldTrace& w, std::size_t n_frames, std::size_t size = 32, double fps = 16.0) {
  require(n_frames >= 1 && n_frames <= 64, ErrorKind::UnsupportedFrameCount,
          "frame count " + std::to_string(n_frames) + " outside [1, 64]");
  require(size >= 8, ErrorKind::InvalidArgument, "frames must be at least 8 pixels wide");
  VideoClip clip{n_frames, size, size, fps, std::vector<float>(n_frames * size * size * 3)};
  const double scale = static_cast<double>(size) / 32.0;
  for (std::size_t f = 0; f < n_frames; ++f) {
    const double t = (static_cast<double>(f) + 0.5) * kTimeline / static_cast<double>(n_frames);
    const SceneState s = scene_at(w, t);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        detail::paint(clip, f, static_cast<int>(x), static_cast<int>(y), kRoomColors[static_cast<std::size_t>(w.room)]);
    auto square = [&](Point c, double half, const std::array<float, 3>& rgb, bool diamond) {
      const double cx = c.x * scale, cy = c.y * scale, h = half * scale;
      for (int y = static_cast<int>(std::floor(cy - h)); y < static_cast<int>(std::ceil(cy + h)); ++y)
        for (int x = static_cast<int>(std::floor(cx - h)); x < static_cast<int>(std::ceil(cx + h)); ++x) {
          const double dx = std::abs(x + 0.5 - cx), dy = std::abs(y + 0.5 - cy);
          if (diamond ? dx + dy <= h : (dx <= h && dy <= h)) detail::paint(clip, f, x, y, rgb);
        }
    };
    for (std::size_t i = 0; i < 2; ++i)
      if (!s.held[i]) square(s.objects[i], 2.0, kObjectRgb[static_cast<std::size_t>(w.objects[i].kind)], false);
    if (s.actor_visible) {
      square(s.actor, w.woman ? 3.5 : 3.0, kActorRgb[static_cast<std::size_t>(w.actor_color)], w.woman);
      for (std::size_t i = 0; i < 2; ++i)
        if (s.held[i]) square(s.objects[i], 2.0, kObjectRgb[static_cast<std::size_t>(w.objects[i].kind)], false);
    }
  }
  return clip;
}

// ---------------------------------------------------------------------------
// Audio
// ---------------------------------------------------------------------------

inline constexpr std::size_t kAudioRawDim = 16;

/// Onset row of an event among `m_steps` audio rows.
inline std::size_t audio_row(const Event& e, std::size_t m_steps) {
  const auto row = static_cast<std::size_t>(e.start / kTimeline * static_cast<double>(m_steps));
  return std::min(row, m_steps - 1);
}

/// Raw [m × 16] signal: silence with one pulse per event onset whose shape
/// encodes the event type and object.
inline std::vector<double> audio_signal(const WorldTrace& w, std::size_t m_steps) {
  require(m_steps >= 1, ErrorKind::InvalidArgument, "audio needs at least one step");
  std::vector<double> raw(m_steps * kAudioRawDim, 0.0);
  for (const Event& e : w.events) {
    const std::size_t row = audio_row(e, m_steps);
    raw[row * kAudioRawDim + static_cast<std::size_t>(e.type)] += 1.0;
    const int kind = e.object >= 0 ? w.objects[static_cast<std::size_t>(e.object)].kind : 6;
    raw[row * kAudioRawDim + 5 + static_cast<std::size_t>(kind)] += 0.5;
  }
  return raw;
}

inline AudioFeatures synth_audio(const WorldTrace& w, std::size_t m_steps, const FrozenAudioFeaturizer& featurizer) {
  require(featurizer.raw_dim() == kAudioRawDim, ErrorKind::ShapeMismatch, "featurizer raw width");
  return featurizer(audio_signal(w, m_steps), m_steps);
}

// ---------------------------------------------------------------------------
// Dialog
// ---------------------------------------------------------------------------

struct ScriptedTurn {
  std::string question;
  std::string answer;
  std::string type;
  bool coreference = false;
};

inline const char* number_word(std::size_t n) {
  static constexpr std::array<const char*, 10> words = {"zero", "one", "two",   "three", "four",
                                                        "five", "six", "seven", "eight", "nine"};
  return n < words.size() ? words[n] : "many";
}

inline std::string event_phrase(const WorldTrace& w, const Event& e) {
  const std::string p = w.pronoun();
  auto object = [&] { return std::string(kObjects[static_cast<std::size_t>(w.objects[static_cast<std::size_t>(e.object)].kind)]); };
  switch (e.type) {
    case EventType::Enter: return p + " comes into the room";
    case EventType::Pick: return p + " picks up the " + object();
    case EventType::PutDown: return p + " puts the " + object() + " down";
    case EventType::MoveTo: return p + " walks to the " + std::string(kPlaces[static_cast<std::size_t>(e.place)]);
    case EventType::Exit: return p + " leaves the room";
  }
  return {};
}

/// The ten scripted rounds. Round 5 mentions one of the two objects at
/// random; rounds 6 and 7 refer back to it with "it".
inline std::vector<ScriptedTurn> script_dialog(const WorldTrace& w) {
  Rng rng(mix_seed(w.seed, 0xD1A));
  const std::string p = w.pronoun();
  auto object_name = [&](int i) { return std::string(kObjects[static_cast<std::size_t>(w.objects[static_cast<std::size_t>(i)].kind)]); };
  const int mentioned = static_cast<int>(rng.below(2));
  std::size_t picks = 0;
  bool mentioned_picked = false;
  for (const Event& e : w.events)
    if (e.type == EventType::Pick) {
      ++picks;
      mentioned_picked = mentioned_picked || e.object == mentioned;
    }

  std::vector<ScriptedTurn> turns;
  turns.push_back({"where does the video take place?",
                   p + " is in the " + std::string(kRooms[static_cast<std::size_t>(w.room)]), "room"});
  turns.push_back({"who is in the video?",
                   std::string("a ") + kActorColors[static_cast<std::size_t>(w.actor_color)] + (w.woman ? " woman" : " man"),
                   "who"});
  turns.push_back({"what does " + p + " pick up first?", "first " + p + " picks up the " + object_name(0), "first_pick"});
  turns.push_back({"what else is in the room?", "there is also a " + object_name(1), "other_object"});
  turns.push_back({"can you name one thing you see?", "i see a " + object_name(mentioned), "mention"});
  turns.push_back({"what color is it?",
                   std::string("it is ") + kObjectColors[static_cast<std::size_t>(w.objects[static_cast<std::size_t>(mentioned)].kind)],
                   "object_color", true});
  turns.push_back({"does " + p + " pick it up?", mentioned_picked ? "yes , " + p + " does" : "no , " + p + " does not",
                   "picked_it", true});
  turns.push_back({"what is the last thing " + p + " does?", event_phrase(w, w.events.back()), "last_action"});
  turns.push_back({"how many things does " + p + " pick up?",
                   p + " picks up " + number_word(picks) + (picks == 1 ? " thing" : " things"), "pick_count"});
  turns.push_back({"how many sounds do you hear?", std::string("i hear ") + number_word(w.events.size()) + " sounds",
                   "sound_count"});
  return turns;
}

/// Question types whose answer is fixed by the clip and not by the dialog text.
inline bool visually_determined(std::string_view type) {
  static constexpr std::array<std::string_view, 6> types = {"room", "who", "first_pick", "other_object", "last_action",
                                                            "pick_count"};
  return std::find(types.begin(), types.end(), type) != types.end();
}

/// Generic scene description; carries no trace information.
inline std::string caption_for(std::uint64_t seed) {
  static constexpr std::array<const char*, 5> captions = {
      "a person is doing something in a room", "someone walks around and handles things",
      "a short clip of a person at home", "a person moves around a room", "someone is busy with some objects"};
  Rng rng(mix_seed(seed, 0xCA9));
  return captions[rng.below(captions.size())];
}

/// GT plus `pool_size − 1` distinct other answers: same-type answers first,
/// then random answers of other types, shuffled. Returns the GT index.
inline int build_pool(const std::string& answer, const std::string& type,
                      const std::vector<std::pair<std::string, std::string>>& answer_bank, std::size_t pool_size,
                      Rng& rng, std::vector<std::string>& pool) {
  require(pool_size >= 1, ErrorKind::InvalidArgument, "pool size must be positive");
  std::vector<std::string> same, other;
  std::set<std::string> seen{answer};
  for (const auto& [a, t] : answer_bank) {
    if (!seen.insert(a).second) continue;
    (t == type ? same : other).push_back(a);
  }
  require(same.size() + other.size() >= pool_size - 1, ErrorKind::InsufficientDistractors,
          "need " + std::to_string(pool_size - 1) + " distractors, have " + std::to_string(same.size() + other.size()));
  rng.shuffle(std::span<std::string>(same));
  rng.shuffle(std::span<std::string>(other));
  pool.assign(1, answer);
  for (const auto& a : same)
    if (pool.size() < pool_size) pool.push_back(a);
  for (const auto& a : other)
    if (pool.size() < pool_size) pool.push_back(a);
  rng.shuffle(std::span<std::string>(pool));
  return static_cast<int>(std::find(pool.begin(), pool.end(), answer) - pool.begin());
}

/// Ten DialogSamples for one trace; pools are drawn from `answer_bank`
/// (answer, question type) pairs collected over the dataset.
inline std::vector<DialogSample> generate_dialog(const WorldTrace& w, int dialog_index, std::size_t rounds,
                                                 std::size_t pool_size,
                                                 const std::vector<std::pair<std::string, std::string>>& answer_bank) {
  const auto turns = script_dialog(w);
  require(rounds >= 1 && rounds <= turns.size(), ErrorKind::InvalidArgument, "rounds must be in [1, 10]");
  Rng rng(mix_seed(w.seed, 0x9001));
  std::vector<DialogSample> out;
  const std::string caption = caption_for(w.seed);
  char ref[32];
  std::snprintf(ref, sizeof ref, "%05d", dialog_index);
  for (std::size_t r = 0; r < rounds; ++r) {
    DialogSample s;
    s.id = std::string("d") + ref + "_r" + std::to_string(r + 1);
    s.dialog_index = dialog_index;
    s.round = static_cast<int>(r) + 1;
    s.caption = caption;
    for (std::size_t h = 0; h < r; ++h) s.history.push_back({turns[h].question, turns[h].answer});
    s.question = turns[r].question;
    s.answer = turns[r].answer;
    s.question_type = turns[r].type;
    s.coreference = turns[r].coreference;
    s.gt_index = build_pool(s.answer, s.question_type, answer_bank, pool_size, rng, s.candidates);
    s.video_ref = std::string("clips/") + ref + ".bin";
    s.audio_ref = std::string("audio/") + ref + ".bin";
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Whole datasets
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::size_t dialogs = 200;
  std::size_t rounds = 10;
  std::size_t frames = 16;
  std::size_t frame_size = 32;
  double fps = 16.0;
  std::size_t audio_steps = 8;
  std::size_t audio_dim = 32;
  std::size_t pool_size = 100;
  double val_fraction = 0.15;
  double test_fraction = 0.15;
  std::uint64_t seed = 1;
};

struct Dataset {
  std::vector<DialogSample> samples;
  std::map<std::string, VideoClip> clips;
  std::map<std::string, AudioFeatures> audio;

  std::vector<const DialogSample*> split(std::string_view name) const {
    std::vector<const DialogSample*> out;
    for (const auto& s : samples)
      if (s.split == name) out.push_back(&s);
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline std::uint64_t dialog_seed(std::uint64_t master, std::size_t dialog) { return mix_seed(master, dialog + 1); }

inline std::string split_of(const SynthConfig& cfg, std::size_t dialog) {
  const auto test = static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(cfg.dialogs)));
  const auto val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(cfg.dialogs)));
  if (dialog + test >= cfg.dialogs) return "test";
  if (dialog + test + val >= cfg.dialogs) return "val";
  return "train";
}

inline FrozenAudioFeaturizer default_featurizer(const SynthConfig& cfg) {
  return FrozenAudioFeaturizer(kAudioRawDim, cfg.audio_dim, mix_seed(cfg.seed, 0xA0D10));
}

/// Dataset bytes depend on (cfg, cfg.seed) only; each dialog draws from its
/// own seed so generation order does not matter.
inline Dataset generate_dataset(const SynthConfig& cfg) {
  require(cfg.dialogs >= 1, ErrorKind::InvalidArgument, "dataset needs at least one dialog");
  std::vector<WorldTrace> traces;
  std::vector<std::pair<std::string, std::string>> bank;
  std::set<std::string> seen;
  for (std::size_t d = 0; d < cfg.dialogs; ++d) {
    traces.push_back(generate_world_trace(dialog_seed(cfg.seed, d)));
    for (const auto& t : script_dialog(traces.back()))
      if (seen.insert(t.answer).second) bank.emplace_back(t.answer, t.type);
  }
  const FrozenAudioFeaturizer featurizer = default_featurizer(cfg);
  Dataset data;
  for (std::size_t d = 0; d < cfg.dialogs; ++d) {
    auto samples = generate_dialog(traces[d], static_cast<int>(d), cfg.rounds, cfg.pool_size, bank);
    const std::string split = split_of(cfg, d);
    for (auto& s : samples) s.split = split;
    data.clips[samples.front().video_ref] = render_frames(traces[d], cfg.frames, cfg.frame_size, cfg.fps);
    data.audio[samples.front().audio_ref] = synth_audio(traces[d], cfg.audio_steps, featurizer);
    data.samples.insert(data.samples.end(), samples.begin(), samples.end());
  }
  return data;
}

}  // namespace vdial::synth
