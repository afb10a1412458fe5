#include "ssh/ssh_wire.hpp"

#include <sodium.h>

namespace decoysh::ssh {

Writer& Writer::mpint(const unsigned char* p, std::size_t n) {
  while (n > 0 && *p == 0) {
    ++p;
    --n;
  }
  if (n == 0) return u32(0);
  bool pad = (p[0] & 0x80) != 0;
  u32(static_cast<std::uint32_t>(n + (pad ? 1 : 0)));
  if (pad) u8(0);
  return raw(p, n);
}

void Reader::need(std::size_t n) const {
  if (static_cast<std::size_t>(end_ - p_) < n) throw ProtocolError("truncated message");
}

unsigned char Reader::u8() {
  need(1);
  return *p_++;
}

std::uint32_t Reader::u32() {
  need(4);
  std::uint32_t v = (std::uint32_t{p_[0]} << 24) | (std::uint32_t{p_[1]} << 16) | (std::uint32_t{p_[2]} << 8) | p_[3];
  p_ += 4;
  return v;
}

Bytes Reader::bytes() {
  auto n = u32();
  need(n);
  Bytes out(p_, p_ + n);
  p_ += n;
  return out;
}

std::string Reader::string() {
  auto b = bytes();
  return {b.begin(), b.end()};
}

namespace {

std::array<unsigned char, 8> nonce_for(std::uint32_t seqnr) {
  std::array<unsigned char, 8> n{};
  n[4] = static_cast<unsigned char>(seqnr >> 24);
  n[5] = static_cast<unsigned char>(seqnr >> 16);
  n[6] = static_cast<unsigned char>(seqnr >> 8);
  n[7] = static_cast<unsigned char>(seqnr);
  return n;
}

}  // namespace

ChachaPoly::ChachaPoly(const Bytes& key64) {
  if (key64.size() < 64) throw ProtocolError("chacha20-poly1305 needs 64 key bytes");
  std::copy(key64.begin(), key64.begin() + 32, main_key_.begin());
  std::copy(key64.begin() + 32, key64.begin() + 64, header_key_.begin());
}

void ChachaPoly::seal(std::uint32_t seqnr, Bytes& packet) const {
  auto nonce = nonce_for(seqnr);
  std::array<unsigned char, 32> poly_key{};
  crypto_stream_chacha20(poly_key.data(), poly_key.size(), nonce.data(), main_key_.data());
  crypto_stream_chacha20_xor(packet.data(), packet.data(), 4, nonce.data(), header_key_.data());
  crypto_stream_chacha20_xor_ic(packet.data() + 4, packet.data() + 4, packet.size() - 4, nonce.data(), 1,
                                main_key_.data());
  std::array<unsigned char, kTagLen> tag{};
  crypto_onetimeauth_poly1305(tag.data(), packet.data(), packet.size(), poly_key.data());
  packet.insert(packet.end(), tag.begin(), tag.end());
}

std::uint32_t ChachaPoly::open_length(std::uint32_t seqnr, const unsigned char* enc_len) const {
  auto nonce = nonce_for(seqnr);
  unsigned char plain[4];
  crypto_stream_chacha20_xor(plain, enc_len, 4, nonce.data(), header_key_.data());
  return (std::uint32_t{plain[0]} << 24) | (std::uint32_t{plain[1]} << 16) | (std::uint32_t{plain[2]} << 8) | plain[3];
}

Bytes ChachaPoly::open(std::uint32_t seqnr, const unsigned char* data, std::size_t body_len) const {
  auto nonce = nonce_for(seqnr);
  std::array<unsigned char, 32> poly_key{};
  crypto_stream_chacha20(poly_key.data(), poly_key.size(), nonce.data(), main_key_.data());
  if (crypto_onetimeauth_poly1305_verify(data + 4 + body_len, data, 4 + body_len, poly_key.data()) != 0) {
    throw ProtocolError("message authentication failed");
  }
  Bytes body(body_len);
  crypto_stream_chacha20_xor_ic(body.data(), data + 4, body_len, nonce.data(), 1, main_key_.data());
  return body;
}

Bytes sha256(const Bytes& data) {
  Bytes out(crypto_hash_sha256_BYTES);
  crypto_hash_sha256(out.data(), data.data(), data.size());
  return out;
}

Bytes derive_key(const Bytes& k_mpint, const Bytes& h, char letter, const Bytes& session_id, std::size_t need) {
  Writer w;
  w.raw(k_mpint).raw(h).u8(static_cast<unsigned char>(letter)).raw(session_id);
  Bytes key = sha256(w.bytes());
  while (key.size() < need) {
    Writer more;
    more.raw(k_mpint).raw(h).raw(key);
    auto next = sha256(more.bytes());
    key.insert(key.end(), next.begin(), next.end());
  }
  key.resize(need);
  return key;
}

}  // namespace decoysh::ssh
