#include "affetto/midi.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <map>
#include <set>

namespace affetto {

namespace {

constexpr double kDefaultUsPerQuarter = 500000.0;  // 120 BPM
constexpr int64_t kRollBinMs = 50;

struct Reader {
  std::span<const uint8_t> bytes;
  size_t pos = 0;

  size_t remaining() const { return bytes.size() - pos; }

  uint8_t u8() {
    if (pos >= bytes.size()) throw MidiParseError("unexpected end of file", pos);
    return bytes[pos++];
  }

  uint16_t u16() {
    uint16_t hi = u8(), lo = u8();
    return static_cast<uint16_t>(hi << 8 | lo);
  }

  uint32_t u32() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = v << 8 | u8();
    return v;
  }

  uint32_t vlq() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      uint8_t b = u8();
      v = v << 7 | (b & 0x7f);
      if (!(b & 0x80)) return v;
    }
    throw MidiParseError("variable-length quantity longer than 4 bytes", pos);
  }

  void skip(size_t n) {
    if (remaining() < n) throw MidiParseError("chunk overruns file", pos);
    pos += n;
  }
};

struct RawNote {
  int64_t tick = 0;
  int seq = 0;  // merge-stable tiebreak
  Instrument instrument = Instrument::piano;
  int pitch = 0;
  EventKind kind = EventKind::on;
};

struct RawTempo {
  int64_t tick = 0;
  double us_per_quarter = kDefaultUsPerQuarter;
};

struct RawTimeSig {
  int64_t tick = 0;
  int numerator = 4;
  int denominator = 4;
};

void write_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v & 0xff));
}

void write_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8)
    out.push_back(static_cast<uint8_t>(v >> shift & 0xff));
}

void write_vlq(std::vector<uint8_t>& out, int64_t v) {
  uint8_t buf[5];
  int n = 0;
  do {
    buf[n++] = static_cast<uint8_t>(v & 0x7f);
    v >>= 7;
  } while (v > 0);
  while (n > 1) out.push_back(buf[--n] | 0x80);
  out.push_back(buf[0]);
}

}  // namespace

const char* instrument_name(Instrument inst) {
  static constexpr std::array<const char*, 5> names = {"drums", "piano", "guitar",
                                                       "bass", "strings"};
  return names[static_cast<size_t>(inst)];
}

bool canonical_less(const NoteEvent& a, const NoteEvent& b) {
  if (a.time_ms != b.time_ms) return a.time_ms < b.time_ms;
  if (a.kind != b.kind) return a.kind == EventKind::off;
  if (a.instrument != b.instrument) return a.instrument < b.instrument;
  return a.pitch < b.pitch;
}

bool is_canonically_sorted(const NoteEventList& events) {
  return std::is_sorted(events.begin(), events.end(), canonical_less);
}

void canonical_sort(NoteEventList& events) {
  std::stable_sort(events.begin(), events.end(), canonical_less);
}

MidiParseError::MidiParseError(const std::string& what, size_t byte_offset)
    : std::runtime_error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
      offset_(byte_offset) {}

Instrument map_to_five(int program, bool is_percussion_channel) {
  if (is_percussion_channel) return Instrument::drums;
  if (program >= 0 && program <= 7) return Instrument::piano;
  if (program >= 24 && program <= 31) return Instrument::guitar;
  if (program >= 32 && program <= 39) return Instrument::bass;
  return Instrument::strings;
}

MidiSong parse_midi(std::span<const uint8_t> bytes) {
  Reader r{bytes};

  if (r.remaining() < 14 || std::memcmp(bytes.data(), "MThd", 4) != 0)
    throw MidiParseError("missing MThd header", 0);
  r.pos = 4;
  uint32_t header_len = r.u32();
  if (header_len < 6) throw MidiParseError("MThd shorter than 6 bytes", r.pos);
  uint16_t format = r.u16();
  uint16_t ntrks = r.u16();
  uint16_t division = r.u16();
  r.skip(header_len - 6);
  if (format > 1) throw MidiParseError("unsupported SMF format " + std::to_string(format), 8);
  if (ntrks == 0) throw MidiParseError("file declares zero tracks", 10);
  if (division & 0x8000) throw MidiParseError("SMPTE division is not supported", 12);
  if (division == 0) throw MidiParseError("division of zero ticks per quarter", 12);

  std::vector<RawNote> notes;
  std::vector<RawTempo> tempos;
  std::vector<RawTimeSig> timesigs;
  int64_t max_tick = 0;
  int seq = 0;

  for (int trk = 0; trk < ntrks; ++trk) {
    if (r.remaining() < 8) throw MidiParseError("missing MTrk chunk", r.pos);
    if (std::memcmp(bytes.data() + r.pos, "MTrk", 4) != 0)
      throw MidiParseError("expected MTrk chunk id", r.pos);
    r.pos += 4;
    uint32_t track_len = r.u32();
    size_t track_end = r.pos + track_len;
    if (track_end > bytes.size())
      throw MidiParseError("track chunk overruns file", r.pos - 4);

    std::array<int, 16> program{};  // current GM program per channel
    int64_t tick = 0;
    uint8_t running_status = 0;

    while (r.pos < track_end) {
      tick += r.vlq();
      max_tick = std::max(max_tick, tick);
      uint8_t status = bytes[r.pos];
      if (status & 0x80) {
        r.pos++;
      } else {
        if (!(running_status & 0x80))
          throw MidiParseError("data byte without running status", r.pos);
        status = running_status;
      }

      if (status == 0xff) {  // meta
        uint8_t type = r.u8();
        uint32_t len = r.vlq();
        if (r.remaining() < len) throw MidiParseError("meta event overruns track", r.pos);
        if (type == 0x51 && len == 3) {
          uint32_t us = static_cast<uint32_t>(bytes[r.pos]) << 16 |
                        static_cast<uint32_t>(bytes[r.pos + 1]) << 8 | bytes[r.pos + 2];
          if (us > 0) tempos.push_back({tick, static_cast<double>(us)});
        } else if (type == 0x58 && len >= 2) {
          int num = bytes[r.pos];
          int denom = 1 << bytes[r.pos + 1];
          if (num > 0 && denom > 0) timesigs.push_back({tick, num, denom});
        }
        r.skip(len);
        running_status = 0;
      } else if (status == 0xf0 || status == 0xf7) {  // sysex
        uint32_t len = r.vlq();
        r.skip(len);
        running_status = 0;
      } else if (status >= 0x80) {
        running_status = status;
        uint8_t kind = status & 0xf0;
        int channel = status & 0x0f;
        switch (kind) {
          case 0x80:
          case 0x90: {
            uint8_t pitch = r.u8();
            uint8_t velocity = r.u8();
            if (pitch < kPitchMin || pitch > kPitchMax) break;
            bool is_on = kind == 0x90 && velocity > 0;
            notes.push_back({tick, seq++, map_to_five(program[channel], channel == kPercussionChannel),
                             pitch, is_on ? EventKind::on : EventKind::off});
            break;
          }
          case 0xc0:
            program[channel] = r.u8();
            break;
          case 0xd0:
            r.skip(1);
            break;
          case 0xa0:
          case 0xb0:
          case 0xe0:
            r.skip(2);
            break;
          default:
            throw MidiParseError("unknown status byte", r.pos - 1);
        }
      } else {
        throw MidiParseError("unexpected data byte", r.pos);
      }
    }
    r.pos = track_end;
  }

  // Merge-order pairing: duplicate note-on becomes off+on at that tick,
  // unmatched note-offs are dropped, notes still open close at max_tick.
  std::stable_sort(notes.begin(), notes.end(), [](const RawNote& a, const RawNote& b) {
    if (a.tick != b.tick) return a.tick < b.tick;
    return a.seq < b.seq;
  });

  std::vector<RawNote> paired;
  paired.reserve(notes.size());
  std::map<std::pair<int, int>, bool> active;  // (instrument, pitch) -> sounding
  for (const RawNote& n : notes) {
    auto key = std::make_pair(static_cast<int>(n.instrument), n.pitch);
    bool& sounding = active[key];
    if (n.kind == EventKind::on) {
      if (sounding)
        paired.push_back({n.tick, n.seq, n.instrument, n.pitch, EventKind::off});
      paired.push_back(n);
      sounding = true;
    } else {
      if (!sounding) continue;
      paired.push_back(n);
      sounding = false;
    }
  }
  for (const auto& [key, sounding] : active) {
    if (sounding)
      paired.push_back({max_tick, seq++, static_cast<Instrument>(key.first), key.second,
                        EventKind::off});
  }

  std::stable_sort(tempos.begin(), tempos.end(),
                   [](const RawTempo& a, const RawTempo& b) { return a.tick < b.tick; });
  std::stable_sort(timesigs.begin(), timesigs.end(),
                   [](const RawTimeSig& a, const RawTimeSig& b) { return a.tick < b.tick; });

  // Piecewise tick -> ms conversion over the merged tempo map.
  auto tick_to_ms = [&](int64_t tick) -> int64_t {
    double ms = 0.0;
    double us_per_qn = kDefaultUsPerQuarter;
    int64_t seg_start = 0;
    for (const RawTempo& t : tempos) {
      if (t.tick >= tick) break;
      ms += static_cast<double>(t.tick - seg_start) * us_per_qn / (1000.0 * division);
      seg_start = t.tick;
      us_per_qn = t.us_per_quarter;
    }
    ms += static_cast<double>(tick - seg_start) * us_per_qn / (1000.0 * division);
    return std::llround(ms);
  };

  MidiSong song;
  song.events.reserve(paired.size());
  for (const RawNote& n : paired)
    song.events.push_back({tick_to_ms(n.tick), n.instrument, n.pitch, n.kind});
  canonical_sort(song.events);
  for (const RawTempo& t : tempos)
    song.tempo.push_back({tick_to_ms(t.tick), t.us_per_quarter});
  for (const RawTimeSig& t : timesigs)
    song.timesig.push_back({tick_to_ms(t.tick), t.numerator, t.denominator});
  song.end_ms = song.events.empty() ? 0 : song.events.back().time_ms;
  return song;
}

std::vector<uint8_t> write_midi(const NoteEventList& events, int velocity) {
  if (!is_canonically_sorted(events))
    throw std::invalid_argument("write_midi: events are not canonically sorted");
  velocity = std::clamp(velocity, 1, 127);

  // division 500 with tempo 500000 us/qn makes one tick exactly one ms.
  constexpr uint16_t kDivision = 500;
  static constexpr std::array<int, 5> kProgram = {0, 0, 24, 32, 48};
  static constexpr std::array<int, 5> kChannel = {kPercussionChannel, 0, 1, 2, 3};

  std::vector<uint8_t> out;
  out.insert(out.end(), {'M', 'T', 'h', 'd'});
  write_u32(out, 6);
  write_u16(out, 1);                 // format 1
  write_u16(out, kNumInstruments + 1);
  write_u16(out, kDivision);

  auto emit_track = [&out](const std::vector<uint8_t>& body) {
    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    write_u32(out, static_cast<uint32_t>(body.size()));
    out.insert(out.end(), body.begin(), body.end());
  };

  {  // conductor track: fixed tempo
    std::vector<uint8_t> body;
    write_vlq(body, 0);
    body.insert(body.end(), {0xff, 0x51, 0x03, 0x07, 0xa1, 0x20});  // 500000 us/qn
    write_vlq(body, 0);
    body.insert(body.end(), {0xff, 0x2f, 0x00});
    emit_track(body);
  }

  for (int inst = 0; inst < kNumInstruments; ++inst) {
    std::vector<uint8_t> body;
    uint8_t ch = static_cast<uint8_t>(kChannel[inst]);
    write_vlq(body, 0);
    body.push_back(0xc0 | ch);
    body.push_back(static_cast<uint8_t>(kProgram[inst]));
    int64_t prev = 0;
    for (const NoteEvent& e : events) {
      if (static_cast<int>(e.instrument) != inst) continue;
      write_vlq(body, e.time_ms - prev);
      prev = e.time_ms;
      if (e.kind == EventKind::on) {
        body.push_back(0x90 | ch);
        body.push_back(static_cast<uint8_t>(e.pitch));
        body.push_back(static_cast<uint8_t>(velocity));
      } else {
        body.push_back(0x80 | ch);
        body.push_back(static_cast<uint8_t>(e.pitch));
        body.push_back(0);
      }
    }
    write_vlq(body, 0);
    body.insert(body.end(), {0xff, 0x2f, 0x00});
    emit_track(body);
  }
  return out;
}

std::string ContentHash::hex() const {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 0; i < 16; ++i) s[i] = digits[digest >> (60 - 4 * i) & 0xf];
  return s;
}

ContentHash content_hash(const NoteEventList& events) {
  // Binarized roll cells as sorted (instrument, pitch, bin) triples.
  std::set<std::tuple<int, int, int64_t>> cells;
  std::map<std::pair<int, int>, int64_t> open;
  auto mark = [&cells](int inst, int pitch, int64_t on_ms, int64_t off_ms) {
    int64_t first = on_ms / kRollBinMs;
    int64_t last = off_ms > on_ms ? (off_ms - 1) / kRollBinMs : first;
    for (int64_t b = first; b <= last; ++b) cells.insert({inst, pitch, b});
  };
  for (const NoteEvent& e : events) {
    auto key = std::make_pair(static_cast<int>(e.instrument), e.pitch);
    if (e.kind == EventKind::on) {
      auto it = open.find(key);
      if (it != open.end()) {
        mark(key.first, key.second, it->second, e.time_ms);
        it->second = e.time_ms;
      } else {
        open[key] = e.time_ms;
      }
    } else {
      auto it = open.find(key);
      if (it == open.end()) continue;
      mark(key.first, key.second, it->second, e.time_ms);
      open.erase(it);
    }
  }
  int64_t end = events.empty() ? 0 : events.back().time_ms;
  for (const auto& [key, on_ms] : open) mark(key.first, key.second, on_ms, end);

  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a 64
  auto feed = [&h](uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= v >> (8 * i) & 0xff;
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& [inst, pitch, bin] : cells) {
    feed(static_cast<uint64_t>(inst));
    feed(static_cast<uint64_t>(pitch));
    feed(static_cast<uint64_t>(bin));
  }
  return ContentHash{h};
}

std::vector<int64_t> bar_boundaries(const NoteEventList& events,
                                    const std::vector<TempoEvent>& tempo,
                                    const std::vector<TimeSigEvent>& timesig) {
  int64_t end_ms = events.empty() ? 0 : events.back().time_ms;

  auto beat_ms_at = [&tempo](double t) {
    double us = kDefaultUsPerQuarter;
    for (const TempoEvent& e : tempo) {
      if (static_cast<double>(e.time_ms) > t) break;
      us = e.us_per_quarter;
    }
    return us / 1000.0;
  };
  auto timesig_at = [&timesig](double t) {
    std::pair<int, int> sig{4, 4};
    for (const TimeSigEvent& e : timesig) {
      if (static_cast<double>(e.time_ms) > t) break;
      sig = {e.numerator, e.denominator};
    }
    return sig;
  };

  std::vector<int64_t> bars{0};
  double t = 0.0;
  while (true) {
    auto [num, denom] = timesig_at(t);
    // Advance one bar, beat by beat, so mid-bar tempo changes integrate.
    double bar_end = t;
    for (int beat = 0; beat < num; ++beat)
      bar_end += beat_ms_at(bar_end) * 4.0 / denom;
    // A time-signature change inside the bar restarts the bar there.
    for (const TimeSigEvent& e : timesig) {
      double et = static_cast<double>(e.time_ms);
      if (et > t + 0.5 && et < bar_end - 0.5) {
        bar_end = et;
        break;
      }
    }
    if (bar_end <= t + 0.5) break;  // degenerate map, stop
    t = bar_end;
    int64_t t_ms = std::llround(t);
    if (t_ms > end_ms) break;
    bars.push_back(t_ms);
  }
  return bars;
}

MidiFeatures midi_features(const NoteEventList& events,
                           const std::vector<TempoEvent>& tempo) {
  MidiFeatures f;
  int64_t n_on = 0;
  std::array<bool, kNumInstruments> used{};
  for (const NoteEvent& e : events) {
    if (e.kind == EventKind::on) {
      ++n_on;
      used[static_cast<size_t>(e.instrument)] = true;
    }
  }
  f.n_instruments = static_cast<int>(std::count(used.begin(), used.end(), true));

  int64_t end_ms = events.empty() ? 0 : events.back().time_ms;
  if (end_ms == 0) {
    if (n_on > 0)
      throw std::domain_error("midi_features: notes present but song duration is zero");
    f.note_density = 0.0;
  } else {
    f.note_density = static_cast<double>(n_on) / (static_cast<double>(end_ms) / 1000.0);
  }

  if (tempo.empty() || end_ms == 0) {
    f.tempo_bpm = tempo.empty() ? 120.0 : 60e6 / tempo.front().us_per_quarter;
  } else {
    // Duration-weighted mean of instantaneous BPM over [0, end_ms].
    double weighted = 0.0;
    double us = kDefaultUsPerQuarter;
    int64_t seg_start = 0;
    for (const TempoEvent& t : tempo) {
      int64_t at = std::clamp<int64_t>(t.time_ms, 0, end_ms);
      weighted += 60e6 / us * static_cast<double>(at - seg_start);
      seg_start = at;
      us = t.us_per_quarter;
    }
    weighted += 60e6 / us * static_cast<double>(end_ms - seg_start);
    f.tempo_bpm = weighted / static_cast<double>(end_ms);
  }
  return f;
}

}  // namespace affetto
