#pragma once

// Shared value types for the receiver-datapath model: integer time in
// nanoseconds, byte sizes, bandwidths, opaque identifiers and the
// small/large message split.

#include <compare>
#include <cstdint>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>

namespace rdca {

// Error codes for contract violations. Expected, recoverable outcomes
// (pool exhaustion, a blocked fragment, no posted WQE) are returned as
// empty optionals instead.
enum class Errc {
  ZeroSizeMessage,
  ConfigError,
  DoubleFree,
  UnknownHandle,
  UnknownFragment,
  WrongPath,
  Exhausted,
  CopyFailed,
  InvariantViolation,
};

inline const char* to_string(Errc e) {
  switch (e) {
    case Errc::ZeroSizeMessage: return "ZeroSizeMessage";
    case Errc::ConfigError: return "ConfigError";
    case Errc::DoubleFree: return "DoubleFree";
    case Errc::UnknownHandle: return "UnknownHandle";
    case Errc::UnknownFragment: return "UnknownFragment";
    case Errc::WrongPath: return "WrongPath";
    case Errc::Exhausted: return "Exhausted";
    case Errc::CopyFailed: return "CopyFailed";
    case Errc::InvariantViolation: return "InvariantViolation";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

// Integer quantity tagged with its unit so sizes, times and rates cannot be
// mixed by accident.
template <typename Tag>
struct Quantity {
  std::int64_t value{0};

  constexpr Quantity() = default;
  constexpr explicit Quantity(std::int64_t v) : value(v) {}

  constexpr auto operator<=>(const Quantity&) const = default;

  constexpr Quantity& operator+=(Quantity o) { value += o.value; return *this; }
  constexpr Quantity& operator-=(Quantity o) { value -= o.value; return *this; }
  friend constexpr Quantity operator+(Quantity a, Quantity b) { return Quantity{a.value + b.value}; }
  friend constexpr Quantity operator-(Quantity a, Quantity b) { return Quantity{a.value - b.value}; }
  friend constexpr Quantity operator*(Quantity a, std::int64_t k) { return Quantity{a.value * k}; }
  friend constexpr Quantity operator*(std::int64_t k, Quantity a) { return Quantity{a.value * k}; }

  friend std::ostream& operator<<(std::ostream& os, Quantity q) { return os << q.value; }
};

using Nanos = Quantity<struct NanosTag>;
using ByteSize = Quantity<struct ByteTag>;
using Bandwidth = Quantity<struct BandwidthTag>;  // bytes per second

// Absolute time since simulation start. Durations use the same type.
using SimTime = Nanos;

constexpr Nanos ns(std::int64_t v) { return Nanos{v}; }
constexpr Nanos us(std::int64_t v) { return Nanos{v * 1000}; }
constexpr Nanos ms(std::int64_t v) { return Nanos{v * 1000 * 1000}; }

constexpr ByteSize bytes(std::int64_t v) { return ByteSize{v}; }
constexpr ByteSize KiB(std::int64_t v) { return ByteSize{v * 1024}; }
constexpr ByteSize MiB(std::int64_t v) { return ByteSize{v * 1024 * 1024}; }

// Network rates are decimal: 1 Gbps = 125'000'000 bytes/s.
constexpr Bandwidth gbps(std::int64_t v) { return Bandwidth{v * 125'000'000}; }
constexpr Bandwidth gb_per_s(std::int64_t v) { return Bandwidth{v * 1'000'000'000}; }

// Bytes transferred at `bw` over `dt`, rounded down.
constexpr ByteSize transfer(Bandwidth bw, Nanos dt) {
  return ByteSize{static_cast<std::int64_t>(static_cast<__int128>(bw.value) * dt.value / 1'000'000'000)};
}

// Time to move `b` at `bw`, rounded up. bw must be positive.
constexpr Nanos transfer_time(ByteSize b, Bandwidth bw) {
  const __int128 num = static_cast<__int128>(b.value) * 1'000'000'000;
  return Nanos{static_cast<std::int64_t>((num + bw.value - 1) / bw.value)};
}

constexpr std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

constexpr double to_gbps(Bandwidth bw) { return static_cast<double>(bw.value) * 8.0 / 1e9; }
constexpr double to_us(Nanos t) { return static_cast<double>(t.value) / 1e3; }

template <typename Tag>
struct Id {
  std::uint64_t value{0};

  constexpr Id() = default;
  constexpr explicit Id(std::uint64_t v) : value(v) {}
  constexpr auto operator<=>(const Id&) const = default;

  friend std::ostream& operator<<(std::ostream& os, Id id) { return os << id.value; }
};

using AppId = Id<struct AppTag>;
using QpId = Id<struct QpTag>;
using MsgId = Id<struct MsgTag>;

// Dense per-run counter; ids are strictly increasing.
template <typename IdT>
class IdFactory {
 public:
  IdT next() { return IdT{next_++}; }
  std::uint64_t issued() const { return next_; }

 private:
  std::uint64_t next_{0};
};

enum class MsgKind { Small, Large };

inline const char* to_string(MsgKind k) { return k == MsgKind::Small ? "Small" : "Large"; }

inline constexpr ByteSize kDefaultSmallThreshold = KiB(4);

// The boundary is inclusive on the Small side: a message of exactly
// `threshold` bytes fits one SRQ WQE buffer.
inline MsgKind classify(ByteSize size, ByteSize threshold = kDefaultSmallThreshold) {
  if (size.value <= 0) throw Error(Errc::ZeroSizeMessage, "message size must be positive");
  return size <= threshold ? MsgKind::Small : MsgKind::Large;
}

struct Message {
  MsgId id;
  AppId app;
  QpId qp;
  ByteSize size;
  SimTime created_at;
  MsgKind kind{MsgKind::Large};

  static Message make(MsgId id, AppId app, QpId qp, ByteSize size, SimTime now,
                      ByteSize threshold = kDefaultSmallThreshold) {
    return Message{id, app, qp, size, now, classify(size, threshold)};
  }
};

}  // namespace rdca

template <typename Tag>
struct std::hash<rdca::Id<Tag>> {
  std::size_t operator()(rdca::Id<Tag> id) const noexcept { return std::hash<std::uint64_t>{}(id.value); }
};
