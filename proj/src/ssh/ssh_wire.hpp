#pragma once

// SSH-2 wire encoding (RFC 4251 section 5) and the
// chacha20-poly1305@openssh.com packet cipher.

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace decoysh::ssh {

using Bytes = std::vector<unsigned char>;

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum Msg : unsigned char {
  kDisconnect = 1,
  kIgnore = 2,
  kUnimplemented = 3,
  kDebug = 4,
  kServiceRequest = 5,
  kServiceAccept = 6,
  kKexInit = 20,
  kNewKeys = 21,
  kKexEcdhInit = 30,
  kKexEcdhReply = 31,
  kUserauthRequest = 50,
  kUserauthFailure = 51,
  kUserauthSuccess = 52,
  kGlobalRequest = 80,
  kRequestFailure = 82,
  kChannelOpen = 90,
  kChannelOpenConfirmation = 91,
  kChannelOpenFailure = 92,
  kChannelWindowAdjust = 93,
  kChannelData = 94,
  kChannelExtendedData = 95,
  kChannelEof = 96,
  kChannelClose = 97,
  kChannelRequest = 98,
  kChannelSuccess = 99,
  kChannelFailure = 100,
};

class Writer {
 public:
  Writer& u8(unsigned char v) {
    buf_.push_back(v);
    return *this;
  }
  Writer& boolean(bool v) { return u8(v ? 1 : 0); }
  Writer& u32(std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) buf_.push_back(static_cast<unsigned char>(v >> s));
    return *this;
  }
  Writer& raw(const unsigned char* p, std::size_t n) {
    buf_.insert(buf_.end(), p, p + n);
    return *this;
  }
  Writer& raw(const Bytes& b) { return raw(b.data(), b.size()); }
  Writer& string(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    return raw(reinterpret_cast<const unsigned char*>(s.data()), s.size());
  }
  Writer& string(const Bytes& b) {
    u32(static_cast<std::uint32_t>(b.size()));
    return raw(b);
  }
  /// Unsigned big-endian magnitude as an mpint.
  Writer& mpint(const unsigned char* p, std::size_t n);

  const Bytes& bytes() const { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  Bytes buf_;
};

class Reader {
 public:
  explicit Reader(const Bytes& b) : p_(b.data()), end_(b.data() + b.size()) {}

  unsigned char u8();
  bool boolean() { return u8() != 0; }
  std::uint32_t u32();
  Bytes bytes();
  std::string string();
  bool done() const { return p_ == end_; }

 private:
  void need(std::size_t n) const;
  const unsigned char* p_;
  const unsigned char* end_;
};

/// One direction of chacha20-poly1305@openssh.com.
class ChachaPoly {
 public:
  static constexpr std::size_t kTagLen = 16;

  explicit ChachaPoly(const Bytes& key64);

  /// Encrypts `packet` (4-byte length followed by the body) in place and
  /// appends the tag.
  void seal(std::uint32_t seqnr, Bytes& packet) const;
  /// Decrypts the 4-byte length field.
  std::uint32_t open_length(std::uint32_t seqnr, const unsigned char* enc_len) const;
  /// Verifies the tag over length+body and returns the decrypted body.
  /// Throws ProtocolError on MAC failure.
  Bytes open(std::uint32_t seqnr, const unsigned char* data, std::size_t body_len) const;

 private:
  std::array<unsigned char, 32> main_key_{};
  std::array<unsigned char, 32> header_key_{};
};

/// Key derivation per RFC 4253 section 7.2, extended to `need` bytes.
Bytes derive_key(const Bytes& k_mpint, const Bytes& h, char letter, const Bytes& session_id, std::size_t need);

Bytes sha256(const Bytes& data);

}  // namespace decoysh::ssh
