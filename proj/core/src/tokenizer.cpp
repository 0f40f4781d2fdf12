#include "affetto/tokenizer.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace affetto {

namespace vocab {

int note_on(Instrument inst, int pitch) {
  if (pitch < kPitchMin || pitch > kPitchMax)
    throw std::invalid_argument("note_on: pitch " + std::to_string(pitch) + " out of range");
  return kNoteOnBase + static_cast<int>(inst) * kNumPitches + (pitch - kPitchMin);
}

int note_off(Instrument inst, int pitch) {
  return kNoteOffBase + note_on(inst, pitch);
}

int time_shift(int ms) {
  if (ms < kShiftUnitMs || ms > kMaxShiftMs || ms % kShiftUnitMs != 0)
    throw std::invalid_argument("time_shift: " + std::to_string(ms) +
                                " ms is not on the 8 ms grid in [8, 1000]");
  return kTimeShiftBase + ms / kShiftUnitMs - 1;
}

int shift_token_ms(int token) {
  return (token - kTimeShiftBase + 1) * kShiftUnitMs;
}

bool is_note_on(int token) { return token >= kNoteOnBase && token < kNoteOffBase; }
bool is_note_off(int token) { return token >= kNoteOffBase && token < kTimeShiftBase; }
bool is_time_shift(int token) {
  return token >= kTimeShiftBase && token < kTimeShiftBase + kNumTimeShifts;
}
bool is_condition(int token) { return token >= kValenceBinBase && token < kExtendedSize; }

std::string token_name(int token) {
  if (is_note_on(token)) {
    int rel = token - kNoteOnBase;
    return std::string("note_on_") + instrument_name(static_cast<Instrument>(rel / kNumPitches)) +
           "_" + std::to_string(rel % kNumPitches + kPitchMin);
  }
  if (is_note_off(token)) {
    int rel = token - kNoteOffBase;
    return std::string("note_off_") + instrument_name(static_cast<Instrument>(rel / kNumPitches)) +
           "_" + std::to_string(rel % kNumPitches + kPitchMin);
  }
  if (is_time_shift(token)) return "time_shift_" + std::to_string(shift_token_ms(token)) + "ms";
  if (token == kStart) return "<START>";
  if (token == kPad) return "<PAD>";
  if (token >= kValenceBinBase && token < kArousalBinBase)
    return "valence_bin_" + std::to_string(token - kValenceBinBase - 2);
  if (token >= kArousalBinBase && token < kExtendedSize)
    return "arousal_bin_" + std::to_string(token - kArousalBinBase - 2);
  throw std::invalid_argument("token_name: id " + std::to_string(token) + " out of vocabulary");
}

void export_table(std::ostream& out, bool extended) {
  int size = extended ? kExtendedSize : kBaseSize;
  for (int id = 0; id < size; ++id) out << id << '\t' << token_name(id) << '\n';
}

}  // namespace vocab

std::pair<TokenSequence, double> quantize_gap(double gap_ms, double carry_ms) {
  if (gap_ms < 0) throw std::invalid_argument("quantize_gap: negative gap");
  double total = gap_ms + carry_ms;
  // Nearest multiple of 8, ties up. Carry keeps |total| > -4, so k >= 0.
  int64_t k = static_cast<int64_t>(std::floor(total / vocab::kShiftUnitMs + 0.5));
  if (k < 0) k = 0;
  int64_t quantized = k * vocab::kShiftUnitMs;
  TokenSequence tokens;
  int64_t remaining = quantized;
  while (remaining >= vocab::kMaxShiftMs) {
    tokens.push_back(vocab::time_shift(vocab::kMaxShiftMs));
    remaining -= vocab::kMaxShiftMs;
  }
  if (remaining > 0) tokens.push_back(vocab::time_shift(static_cast<int>(remaining)));
  return {std::move(tokens), total - static_cast<double>(quantized)};
}

TokenSequence encode(const NoteEventList& events) {
  for (size_t i = 1; i < events.size(); ++i) {
    if (events[i].time_ms < events[i - 1].time_ms)
      throw std::invalid_argument("encode: events are not sorted by time");
  }
  TokenSequence out;
  out.reserve(events.size() * 2);
  double carry = 0.0;
  int64_t prev_ms = 0;
  for (const NoteEvent& e : events) {
    auto [shifts, new_carry] = quantize_gap(static_cast<double>(e.time_ms - prev_ms), carry);
    carry = new_carry;
    prev_ms = e.time_ms;
    out.insert(out.end(), shifts.begin(), shifts.end());
    out.push_back(e.kind == EventKind::on ? vocab::note_on(e.instrument, e.pitch)
                                          : vocab::note_off(e.instrument, e.pitch));
  }
  return out;
}

NoteEventList decode(const TokenSequence& tokens) {
  NoteEventList out;
  std::map<std::pair<int, int>, bool> active;
  int64_t t = 0;
  for (int token : tokens) {
    if (vocab::is_time_shift(token)) {
      t += vocab::shift_token_ms(token);
    } else if (vocab::is_note_on(token)) {
      int rel = token - vocab::kNoteOnBase;
      auto inst = static_cast<Instrument>(rel / kNumPitches);
      int pitch = rel % kNumPitches + kPitchMin;
      bool& sounding = active[{rel / kNumPitches, pitch}];
      if (sounding) out.push_back({t, inst, pitch, EventKind::off});
      out.push_back({t, inst, pitch, EventKind::on});
      sounding = true;
    } else if (vocab::is_note_off(token)) {
      int rel = token - vocab::kNoteOffBase;
      auto inst = static_cast<Instrument>(rel / kNumPitches);
      int pitch = rel % kNumPitches + kPitchMin;
      auto it = active.find({rel / kNumPitches, pitch});
      if (it == active.end() || !it->second) continue;  // unmatched off
      out.push_back({t, inst, pitch, EventKind::off});
      it->second = false;
    }
    // <START>, <PAD>, condition tokens and anything out of range: skipped.
  }
  for (const auto& [key, sounding] : active) {
    if (sounding)
      out.push_back({t, static_cast<Instrument>(key.first), key.second, EventKind::off});
  }
  return out;
}

int bin_condition(double value) {
  if (value < -1.0 || value > 1.0)
    throw std::domain_error("bin_condition: value " + std::to_string(value) +
                            " outside [-1, 1]");
  if (value < -0.6) return -2;
  if (value < -0.2) return -1;
  if (value < 0.2) return 0;
  if (value < 0.6) return 1;
  return 2;
}

std::pair<int, int> condition_tokens(const ConditionPair& c) {
  return {vocab::kValenceBinBase + bin_condition(c.valence) + 2,
          vocab::kArousalBinBase + bin_condition(c.arousal) + 2};
}

}  // namespace affetto
