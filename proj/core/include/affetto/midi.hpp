#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace affetto {

// The five instrument categories every MIDI track is merged into.
enum class Instrument : uint8_t { drums = 0, piano = 1, guitar = 2, bass = 3, strings = 4 };

inline constexpr int kNumInstruments = 5;
inline constexpr int kPitchMin = 21;   // lowest piano key
inline constexpr int kPitchMax = 108;  // highest piano key
inline constexpr int kNumPitches = kPitchMax - kPitchMin + 1;  // 88
inline constexpr int kPercussionChannel = 9;

const char* instrument_name(Instrument inst);

enum class EventKind : uint8_t { off = 0, on = 1 };

struct NoteEvent {
  int64_t time_ms = 0;
  Instrument instrument = Instrument::piano;
  int pitch = 60;  // always within [kPitchMin, kPitchMax]
  EventKind kind = EventKind::on;

  friend bool operator==(const NoteEvent&, const NoteEvent&) = default;
};

using NoteEventList = std::vector<NoteEvent>;

// Canonical order: (time_ms, off before on, instrument, pitch).
bool canonical_less(const NoteEvent& a, const NoteEvent& b);
bool is_canonically_sorted(const NoteEventList& events);
void canonical_sort(NoteEventList& events);

struct TempoEvent {
  int64_t time_ms = 0;
  double us_per_quarter = 500000.0;
};

struct TimeSigEvent {
  int64_t time_ms = 0;
  int numerator = 4;
  int denominator = 4;
};

struct MidiSong {
  NoteEventList events;
  std::vector<TempoEvent> tempo;      // sorted by time, may be empty
  std::vector<TimeSigEvent> timesig;  // sorted by time, may be empty
  int64_t end_ms = 0;                 // time of the last event in the file
};

struct MidiFeatures {
  double note_density = 0.0;  // note-ons per second
  double tempo_bpm = 120.0;
  int n_instruments = 0;
};

struct ContentHash {
  uint64_t digest = 0;
  std::string hex() const;
  friend bool operator==(const ContentHash&, const ContentHash&) = default;
};

class MidiParseError : public std::runtime_error {
 public:
  MidiParseError(const std::string& what, size_t byte_offset);
  size_t byte_offset() const { return offset_; }

 private:
  size_t offset_;
};

// Parses an SMF format 0/1 byte stream. Note-on with velocity 0 becomes
// note-off, pitches outside [21,108] are dropped, duplicate note-ons get an
// implicit note-off, unmatched note-offs are dropped, and notes still
// sounding at end of file are closed there. Events come back canonically
// sorted with tempo-map-correct millisecond times.
MidiSong parse_midi(std::span<const uint8_t> bytes);

// Serializes to SMF format 1 at one tick per millisecond: one track per
// instrument category plus a conductor track, drums on channel 9. The token
// vocabulary carries no velocity, so a single fixed velocity is used.
// parse_midi(write_midi(e)).events == e for canonically sorted well-paired e.
std::vector<uint8_t> write_midi(const NoteEventList& events, int velocity = 80);

// GM program number + percussion flag -> instrument category.
Instrument map_to_five(int program, bool is_percussion_channel);

// Hash of the binarized piano roll (instrument x pitch x 50ms time bins).
// Metadata, track layout and velocities do not participate.
ContentHash content_hash(const NoteEventList& events);

// Downbeat times from t=0 through the last event, derived from the tempo and
// time-signature maps. Defaults are 4/4 at 120 BPM when maps are empty.
std::vector<int64_t> bar_boundaries(const NoteEventList& events,
                                    const std::vector<TempoEvent>& tempo,
                                    const std::vector<TimeSigEvent>& timesig);

// note_density = note-ons per second, tempo = duration-weighted mean BPM,
// n_instruments = categories holding at least one note.
MidiFeatures midi_features(const NoteEventList& events,
                           const std::vector<TempoEvent>& tempo);

}  // namespace affetto
