#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "affetto/midi.hpp"

namespace affetto {

// Canonical vocabulary layout. Base: 0-439 note-on (instrument-major, pitch
// 21-108), 440-879 note-off, 880-1004 time-shift of (k+1)*8 ms, 1005 <START>,
// 1006 <PAD>. Discrete-token extension: 1007-1011 valence bins -2..+2,
// 1012-1016 arousal bins -2..+2.
namespace vocab {

inline constexpr int kNoteOnBase = 0;
inline constexpr int kNoteOffBase = 440;
inline constexpr int kTimeShiftBase = 880;
inline constexpr int kNumTimeShifts = 125;
inline constexpr int kStart = 1005;
inline constexpr int kPad = 1006;
inline constexpr int kBaseSize = 1007;
inline constexpr int kValenceBinBase = 1007;
inline constexpr int kArousalBinBase = 1012;
inline constexpr int kExtendedSize = 1017;
inline constexpr int kShiftUnitMs = 8;
inline constexpr int kMaxShiftMs = 1000;

int note_on(Instrument inst, int pitch);
int note_off(Instrument inst, int pitch);
int time_shift(int ms);  // ms must be a multiple of 8 in [8, 1000]
int shift_token_ms(int token);

bool is_note_on(int token);
bool is_note_off(int token);
bool is_time_shift(int token);
bool is_condition(int token);

std::string token_name(int token);

// Text table "id<TAB>name", one line per id, in id order.
void export_table(std::ostream& out, bool extended);

}  // namespace vocab

using TokenSequence = std::vector<int>;

struct ConditionPair {
  double valence = 0.0;  // [-1, 1]
  double arousal = 0.0;  // [-1, 1]
  friend bool operator==(const ConditionPair&, const ConditionPair&) = default;
};

// Rounds gap+carry to the nearest multiple of 8 ms (ties up) and emits it as
// maximal 1000 ms tokens plus a remainder token. The rounding residue comes
// back as the new carry, bounding cumulative drift by 4 ms.
std::pair<TokenSequence, double> quantize_gap(double gap_ms, double carry_ms);

// Canonically sorted events -> tokens. No <START>/<PAD> inserted here.
TokenSequence encode(const NoteEventList& events);

// Tokens -> events. <START>, <PAD> and condition tokens are skipped,
// unmatched note-offs are dropped, and dangling note-ons close at the end of
// the sequence. Robust to arbitrary generated input.
NoteEventList decode(const TokenSequence& tokens);

// Bin layout: [-1,-0.6) [-0.6,-0.2) [-0.2,0.2) [0.2,0.6) [0.6,1].
int bin_condition(double value);

// [valence-bin token, arousal-bin token] under the extended vocabulary.
std::pair<int, int> condition_tokens(const ConditionPair& c);

}  // namespace affetto
