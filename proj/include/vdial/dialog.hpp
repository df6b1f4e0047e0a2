#pragma once

#include <string>
#include <vector>

namespace vdial {

struct DialogTurn {
  std::string question;
  std::string answer;

  friend bool operator==(const DialogTurn&, const DialogTurn&) = default;
};

/// One question of one dialog: caption, prior turns, the current question
/// and its ground-truth answer, plus the candidate pool for ranking.
struct DialogSample {
  std::string id;
  int dialog_index = 0;
  int round = 1;  // 1-based; round r has r-1 history turns
  std::string caption;
  std::vector<DialogTurn> history;
  std::string question;
  std::string answer;
  std::vector<std::string> candidates;
  int gt_index = -1;
  std::string video_ref;
  std::string audio_ref;
  std::string question_type;
  bool coreference = false;
  std::string split;

  friend bool operator==(const DialogSample&, const DialogSample&) = default;
};

}  // namespace vdial
