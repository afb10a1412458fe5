// Minimal SSH-2 server: curve25519-sha256 key exchange, ssh-ed25519 host
// key, chacha20-poly1305@openssh.com, password authentication and a single
// interactive session channel driving a ShellSession.

#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <sodium.h>
#include <spdlog/spdlog.h>

#include <cerrno>
#include <fstream>
#include <optional>

#include "decoysh/terminal_frontend.hpp"
#include "ssh/ssh_wire.hpp"

namespace decoysh {

using namespace ssh;

// ---------------------------------------------------------------------------
// Host key

SshHostKey SshHostKey::from_seed(const std::array<unsigned char, 32>& seed) {
  if (sodium_init() < 0) throw std::runtime_error("libsodium init failed");
  SshHostKey k;
  crypto_sign_seed_keypair(k.public_key.data(), k.secret_key.data(), seed.data());
  return k;
}

SshHostKey SshHostKey::generate() {
  if (sodium_init() < 0) throw std::runtime_error("libsodium init failed");
  std::array<unsigned char, 32> seed{};
  randombytes_buf(seed.data(), seed.size());
  return from_seed(seed);
}

SshHostKey SshHostKey::load_or_create(const std::filesystem::path& seed_file) {
  if (sodium_init() < 0) throw std::runtime_error("libsodium init failed");
  std::array<unsigned char, 32> seed{};
  if (std::ifstream in(seed_file); in) {
    std::string hex;
    in >> hex;
    std::size_t bin_len = 0;
    if (sodium_hex2bin(seed.data(), seed.size(), hex.data(), hex.size(), nullptr, &bin_len, nullptr) != 0 ||
        bin_len != seed.size()) {
      throw std::runtime_error(seed_file.string() + ": expected 64 hex characters");
    }
    return from_seed(seed);
  }
  randombytes_buf(seed.data(), seed.size());
  std::array<char, 65> hex{};
  sodium_bin2hex(hex.data(), hex.size(), seed.data(), seed.size());
  std::ofstream out(seed_file);
  if (!out) throw std::runtime_error("cannot write host key seed " + seed_file.string());
  out << hex.data() << '\n';
  return from_seed(seed);
}

namespace {

constexpr std::string_view kServerVersion = "SSH-2.0-OpenSSH_8.2p1 Ubuntu-4ubuntu0.11";
constexpr std::string_view kKexAlgos = "curve25519-sha256,curve25519-sha256@libssh.org";
constexpr std::string_view kHostKeyAlgo = "ssh-ed25519";
constexpr std::string_view kCipher = "chacha20-poly1305@openssh.com";
constexpr std::string_view kMac = "hmac-sha2-256";
constexpr std::uint32_t kWindow = 2 * 1024 * 1024;
constexpr std::uint32_t kMaxPacket = 32768;
constexpr std::size_t kMaxPacketLen = 256 * 1024;
constexpr auto kTick = std::chrono::milliseconds(100);
constexpr int kMaxAuthFailures = 6;

/// Ends the connection; `reason` becomes the session's end_reason.
struct SessionEnd {
  std::string reason;
};

bool name_list_contains(const std::string& list, std::string_view name) {
  std::size_t start = 0;
  while (start <= list.size()) {
    auto comma = list.find(',', start);
    auto item = std::string_view(list).substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (item == name) return true;
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return false;
}

class PacketChannel {
 public:
  PacketChannel(int fd, const std::atomic<bool>& stopping, std::chrono::seconds idle)
      : fd_(fd), stopping_(stopping), idle_(idle), last_input_(std::chrono::steady_clock::now()) {}

  void send_raw(std::string_view s) {
    while (!s.empty()) {
      ssize_t n = ::send(fd_, s.data(), s.size(), MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw SessionEnd{"disconnect"};
      }
      s.remove_prefix(static_cast<std::size_t>(n));
    }
  }

  std::string read_version_line() {
    for (int lines = 0; lines < 32; ++lines) {
      std::string line;
      while (true) {
        fill(1);
        char c = static_cast<char>(in_.front());
        in_.erase(in_.begin());
        if (c == '\n') break;
        line.push_back(c);
        if (line.size() > 255) throw ProtocolError("version line too long");
      }
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.starts_with("SSH-")) {
        if (!line.starts_with("SSH-2.0-") && !line.starts_with("SSH-1.99-")) {
          throw ProtocolError("unsupported protocol version");
        }
        return line;
      }
    }
    throw ProtocolError("no version line");
  }

  void send_packet(const Bytes& payload) {
    const bool aead = out_cipher_.has_value();
    std::size_t unpadded = aead ? 1 + payload.size() : 5 + payload.size();
    std::size_t padding = 8 - (unpadded % 8);
    if (padding < 4) padding += 8;
    Writer w;
    w.u32(static_cast<std::uint32_t>(1 + payload.size() + padding));
    w.u8(static_cast<unsigned char>(padding));
    w.raw(payload);
    Bytes pad(padding);
    randombytes_buf(pad.data(), pad.size());
    w.raw(pad);
    Bytes packet = w.take();
    if (aead) out_cipher_->seal(send_seq_, packet);
    ++send_seq_;
    send_raw(std::string_view(reinterpret_cast<const char*>(packet.data()), packet.size()));
  }

  Bytes read_packet() {
    fill(4);
    std::uint32_t len;
    if (in_cipher_) {
      len = in_cipher_->open_length(recv_seq_, in_.data());
    } else {
      len = (std::uint32_t{in_[0]} << 24) | (std::uint32_t{in_[1]} << 16) | (std::uint32_t{in_[2]} << 8) | in_[3];
    }
    if (len < 5 || len > kMaxPacketLen) throw ProtocolError("bad packet length");
    const std::size_t total = 4 + len + (in_cipher_ ? ChachaPoly::kTagLen : 0);
    fill(total);
    Bytes body;
    if (in_cipher_) {
      body = in_cipher_->open(recv_seq_, in_.data(), len);
    } else {
      body.assign(in_.begin() + 4, in_.begin() + 4 + len);
    }
    in_.erase(in_.begin(), in_.begin() + static_cast<std::ptrdiff_t>(total));
    ++recv_seq_;
    std::size_t pad = body[0];
    if (pad + 1 > body.size()) throw ProtocolError("bad padding length");
    return Bytes(body.begin() + 1, body.end() - static_cast<std::ptrdiff_t>(pad));
  }

  void set_out_cipher(ChachaPoly c) { out_cipher_.emplace(std::move(c)); }
  void set_in_cipher(ChachaPoly c) { in_cipher_.emplace(std::move(c)); }
  std::uint32_t last_recv_seq() const { return recv_seq_ - 1; }
  bool has_buffered() const { return !in_.empty(); }

  /// True when a read would not block.
  bool wait_readable(std::chrono::milliseconds timeout) {
    if (!in_.empty()) return true;
    pollfd pfd{fd_, POLLIN, 0};
    return ::poll(&pfd, 1, static_cast<int>(timeout.count())) > 0;
  }

 private:
  void fill(std::size_t n) {
    char chunk[16384];
    while (in_.size() < n) {
      if (stopping_.load()) throw SessionEnd{"shutdown"};
      if (std::chrono::steady_clock::now() - last_input_ >= idle_) throw SessionEnd{"idle"};
      pollfd pfd{fd_, POLLIN, 0};
      int rc = ::poll(&pfd, 1, static_cast<int>(kTick.count()));
      if (rc < 0 && errno != EINTR) throw SessionEnd{"error"};
      if (rc <= 0) continue;
      ssize_t got = ::recv(fd_, chunk, sizeof chunk, 0);
      if (got <= 0) throw SessionEnd{"disconnect"};
      last_input_ = std::chrono::steady_clock::now();
      in_.insert(in_.end(), chunk, chunk + got);
    }
  }

  int fd_;
  const std::atomic<bool>& stopping_;
  std::chrono::seconds idle_;
  std::chrono::steady_clock::time_point last_input_;
  Bytes in_;
  std::uint32_t send_seq_ = 0;
  std::uint32_t recv_seq_ = 0;
  std::optional<ChachaPoly> out_cipher_;
  std::optional<ChachaPoly> in_cipher_;
};

class SshConnection {
 public:
  SshConnection(int fd, Engine& engine, const TransportBinding& binding, const SshHostKey& key,
                std::string session_id, std::string peer, const std::atomic<bool>& stopping)
      : wire_(fd, stopping, engine.config().idle_timeout),
        engine_(engine),
        binding_(binding),
        key_(key),
        shell_(engine, engine.open_session(std::move(session_id), std::move(peer)), binding) {}

  void run() {
    std::string reason = "disconnect";
    try {
      handshake();
      serve();
    } catch (const SessionEnd& end) {
      reason = end.reason;
      if (reason == "shutdown" || reason == "idle") {
        try {
          if (shell_started_) close_channel(reason == "idle" ? "\r\ntimed out waiting for input: auto-logout\r\n" : "");
        } catch (...) {
        }
      }
    } catch (const ProtocolError& e) {
      spdlog::info("ssh session {}: protocol error: {}", shell_.session().session_id, e.what());
      reason = "protocol_error";
      try {
        Writer w;
        w.u8(kDisconnect).u32(2).string(e.what()).string("");
        wire_.send_packet(w.bytes());
      } catch (...) {
      }
    }
    shell_.finish(reason);
  }

 private:
  // -- key exchange ---------------------------------------------------------

  Bytes server_kexinit() {
    Writer w;
    w.u8(kKexInit);
    Bytes cookie(16);
    randombytes_buf(cookie.data(), cookie.size());
    w.raw(cookie);
    w.string(kKexAlgos).string(kHostKeyAlgo);
    w.string(kCipher).string(kCipher);
    w.string(kMac).string(kMac);
    w.string("none").string("none");
    w.string("").string("");
    w.boolean(false).u32(0);
    return w.take();
  }

  void handshake() {
    wire_.send_raw(std::string(kServerVersion) + "\r\n");
    const std::string client_version = wire_.read_version_line();

    const Bytes i_s = server_kexinit();
    wire_.send_packet(i_s);

    Bytes i_c = next_payload();
    if (i_c.empty() || i_c[0] != kKexInit) throw ProtocolError("expected KEXINIT");
    {
      Reader r(i_c);
      r.u8();
      for (int i = 0; i < 16; ++i) r.u8();
      auto kex = r.string();
      auto hostkey = r.string();
      auto enc_cs = r.string();
      auto enc_sc = r.string();
      if ((!name_list_contains(kex, "curve25519-sha256") && !name_list_contains(kex, "curve25519-sha256@libssh.org")) ||
          !name_list_contains(hostkey, kHostKeyAlgo) || !name_list_contains(enc_cs, kCipher) ||
          !name_list_contains(enc_sc, kCipher)) {
        throw ProtocolError("no matching key exchange, host key or cipher algorithm");
      }
    }

    Bytes init = next_payload();
    if (init.empty() || init[0] != kKexEcdhInit) throw ProtocolError("expected KEX_ECDH_INIT");
    Reader r(init);
    r.u8();
    Bytes q_c = r.bytes();
    if (q_c.size() != crypto_scalarmult_BYTES) throw ProtocolError("bad client ephemeral key");

    std::array<unsigned char, crypto_scalarmult_SCALARBYTES> eph{};
    randombytes_buf(eph.data(), eph.size());
    Bytes q_s(crypto_scalarmult_BYTES);
    crypto_scalarmult_base(q_s.data(), eph.data());
    std::array<unsigned char, crypto_scalarmult_BYTES> shared{};
    if (crypto_scalarmult(shared.data(), eph.data(), q_c.data()) != 0) throw ProtocolError("degenerate shared secret");
    sodium_memzero(eph.data(), eph.size());

    Writer ks;
    ks.string(kHostKeyAlgo).string(Bytes(key_.public_key.begin(), key_.public_key.end()));
    const Bytes k_s = ks.take();

    Writer kw;
    kw.mpint(shared.data(), shared.size());
    const Bytes k_mpint = kw.take();
    sodium_memzero(shared.data(), shared.size());

    Writer hw;
    hw.string(client_version).string(kServerVersion).string(i_c).string(i_s).string(k_s).string(q_c).string(q_s).raw(k_mpint);
    const Bytes h = sha256(hw.bytes());

    Bytes sig(crypto_sign_BYTES);
    crypto_sign_detached(sig.data(), nullptr, h.data(), h.size(), key_.secret_key.data());
    Writer sw;
    sw.string(kHostKeyAlgo).string(sig);

    Writer reply;
    reply.u8(kKexEcdhReply).string(k_s).string(q_s).string(sw.bytes());
    wire_.send_packet(reply.bytes());

    Writer nk;
    nk.u8(kNewKeys);
    wire_.send_packet(nk.bytes());
    const Bytes& session_id = h;
    wire_.set_out_cipher(ChachaPoly(derive_key(k_mpint, h, 'D', session_id, 64)));

    Bytes newkeys = next_payload();
    if (newkeys.empty() || newkeys[0] != kNewKeys) throw ProtocolError("expected NEWKEYS");
    wire_.set_in_cipher(ChachaPoly(derive_key(k_mpint, h, 'C', session_id, 64)));
  }

  /// Next payload, skipping transport-level noise.
  Bytes next_payload() {
    while (true) {
      Bytes p = wire_.read_packet();
      if (p.empty()) throw ProtocolError("empty packet");
      switch (p[0]) {
        case kIgnore:
        case kDebug:
        case kUnimplemented:
          continue;
        case kDisconnect:
          throw SessionEnd{"disconnect"};
        default:
          return p;
      }
    }
  }

  // -- service loop -----------------------------------------------------------

  void serve() {
    while (true) {
      Bytes p = next_payload();
      Reader r(p);
      const auto type = r.u8();
      switch (type) {
        case kServiceRequest: on_service_request(r); break;
        case kUserauthRequest: on_userauth(r); break;
        case kGlobalRequest: on_global_request(r); break;
        case kChannelOpen: on_channel_open(r); break;
        case kChannelRequest: on_channel_request(r); break;
        case kChannelWindowAdjust: on_window_adjust(r); break;
        case kChannelData: on_channel_data(r); break;
        case kChannelExtendedData: break;
        case kChannelEof: throw SessionEnd{"disconnect"};
        case kChannelClose:
          if (!sent_close_) send_channel_close();
          throw SessionEnd{"disconnect"};
        case kKexInit: throw ProtocolError("re-keying is not supported");
        default: {
          Writer w;
          w.u8(kUnimplemented).u32(wire_.last_recv_seq());
          wire_.send_packet(w.bytes());
        }
      }
      if (closing_) throw SessionEnd{closing_reason_};
    }
  }

  void on_service_request(Reader& r) {
    auto name = r.string();
    if (name != "ssh-userauth" && !(authenticated_ && name == "ssh-connection")) {
      throw ProtocolError("service not available: " + name);
    }
    Writer w;
    w.u8(kServiceAccept).string(name);
    wire_.send_packet(w.bytes());
  }

  void auth_failure() {
    Writer w;
    w.u8(kUserauthFailure).string("password").boolean(false);
    wire_.send_packet(w.bytes());
  }

  void on_userauth(Reader& r) {
    auto user = r.string();
    auto service = r.string();
    auto method = r.string();
    if (authenticated_) return;
    if (method != "password") {
      auth_failure();
      return;
    }
    r.boolean();
    auto password = r.string();
    ++password_attempts_;
    if (binding_.auth.accepts(user, password, password_attempts_)) {
      authenticated_ = true;
      engine_.record_login(shell_.session(), user, password);
      Writer w;
      w.u8(kUserauthSuccess);
      wire_.send_packet(w.bytes());
      return;
    }
    if (password_attempts_ >= kMaxAuthFailures) throw SessionEnd{"auth_failed"};
    auth_failure();
  }

  void on_global_request(Reader& r) {
    r.string();
    if (r.boolean()) {
      Writer w;
      w.u8(kRequestFailure);
      wire_.send_packet(w.bytes());
    }
  }

  void on_channel_open(Reader& r) {
    auto type = r.string();
    auto sender = r.u32();
    auto window = r.u32();
    auto max_packet = r.u32();
    if (!authenticated_ || type != "session" || channel_open_) {
      Writer w;
      w.u8(kChannelOpenFailure).u32(sender).u32(1).string("administratively prohibited").string("");
      wire_.send_packet(w.bytes());
      return;
    }
    channel_open_ = true;
    remote_channel_ = sender;
    remote_window_ = window;
    remote_max_packet_ = std::max<std::uint32_t>(1024, std::min(max_packet, kMaxPacket));
    local_window_ = kWindow;
    Writer w;
    w.u8(kChannelOpenConfirmation).u32(sender).u32(0).u32(kWindow).u32(kMaxPacket);
    wire_.send_packet(w.bytes());
  }

  void reply_channel(bool ok) {
    Writer w;
    w.u8(ok ? kChannelSuccess : kChannelFailure).u32(remote_channel_);
    wire_.send_packet(w.bytes());
  }

  void on_channel_request(Reader& r) {
    r.u32();
    auto type = r.string();
    bool want_reply = r.boolean();
    bool ok = false;
    if (type == "pty-req") {
      pty_ = true;
      ok = true;
    } else if (type == "shell" && !shell_started_) {
      ok = true;
      if (want_reply) reply_channel(true);
      want_reply = false;
      shell_started_ = true;
      send_text(shell_.greeting());
    } else if (type == "env" || type == "window-change" || type == "signal") {
      ok = type != "env";
    }
    if (want_reply) reply_channel(ok);
  }

  void on_window_adjust(Reader& r) {
    r.u32();
    remote_window_ += r.u32();
  }

  void on_channel_data(Reader& r) {
    r.u32();
    Bytes data = r.bytes();
    local_window_ -= std::min<std::uint32_t>(local_window_, static_cast<std::uint32_t>(data.size()));
    if (local_window_ < kWindow / 2) {
      Writer w;
      w.u8(kChannelWindowAdjust).u32(remote_channel_).u32(kWindow - local_window_);
      wire_.send_packet(w.bytes());
      local_window_ = kWindow;
    }
    if (!shell_started_) return;
    for (unsigned char c : data) {
      on_key(c);
      if (closing_) return;
    }
  }

  // -- line discipline --------------------------------------------------------

  void on_key(unsigned char c) {
    if (escape_ == 1) {
      escape_ = c == '[' || c == 'O' ? 2 : 0;
      return;
    }
    if (escape_ == 2) {
      if (c >= 0x40 && c <= 0x7e) escape_ = 0;
      return;
    }
    const bool was_cr = last_cr_;
    last_cr_ = false;
    switch (c) {
      case '\r':
        last_cr_ = true;
        submit();
        return;
      case '\n':
        if (!was_cr || !pty_) submit();
        return;
      case 0:
        return;
      case 0x7f:
      case 0x08:
        if (!line_.empty()) {
          do {
            line_.pop_back();
          } while (!line_.empty() && (static_cast<unsigned char>(line_.back()) & 0xc0) == 0x80);
          if (pty_) send_text("\b \b");
        }
        return;
      case 0x03:
        line_.clear();
        send_text(pty_ ? "^C\n" + shell_.prompt() : shell_.prompt());
        return;
      case 0x04:
        if (line_.empty()) close_channel("logout\n", "exit");
        return;
      case 0x15:
        if (pty_) {
          for (std::size_t i = 0; i < line_.size(); ++i) send_text("\b \b");
        }
        line_.clear();
        return;
      case 0x1b:
        escape_ = 1;
        return;
      case '\t':
        return;
      default:
        if (c < 0x20) return;
        line_.push_back(static_cast<char>(c));
        if (pty_) send_text(std::string(1, static_cast<char>(c)));
    }
  }

  void submit() {
    if (pty_) send_text("\n");
    std::string line = std::move(line_);
    line_.clear();
    auto reply = shell_.on_line(line);
    if (reply.close) {
      close_channel(reply.text, reply.reason);
      return;
    }
    send_text(reply.text);
  }

  // -- output -----------------------------------------------------------------

  void send_text(std::string_view text) {
    std::string out;
    out.reserve(text.size() + 16);
    for (std::size_t i = 0; i < text.size(); ++i) {
      if (pty_ && text[i] == '\n' && (i == 0 || text[i - 1] != '\r')) out.push_back('\r');
      out.push_back(text[i]);
    }
    std::size_t off = 0;
    while (off < out.size()) {
      while (remote_window_ == 0) wait_for_window();
      std::size_t n = std::min<std::size_t>({out.size() - off, remote_window_, remote_max_packet_});
      Writer w;
      w.u8(kChannelData).u32(remote_channel_).string(std::string_view(out).substr(off, n));
      wire_.send_packet(w.bytes());
      remote_window_ -= static_cast<std::uint32_t>(n);
      off += n;
    }
  }

  void wait_for_window() {
    Bytes p = next_payload();
    Reader r(p);
    auto type = r.u8();
    if (type == kChannelWindowAdjust) {
      on_window_adjust(r);
    } else if (type == kChannelClose || type == kChannelEof) {
      throw SessionEnd{"disconnect"};
    }
  }

  void send_channel_close() {
    sent_close_ = true;
    Writer w;
    w.u8(kChannelClose).u32(remote_channel_);
    wire_.send_packet(w.bytes());
  }

  void close_channel(std::string_view text, std::string_view reason = "") {
    if (!text.empty()) send_text(text);
    Writer status;
    status.u8(kChannelRequest).u32(remote_channel_).string("exit-status").boolean(false).u32(0);
    wire_.send_packet(status.bytes());
    Writer eof;
    eof.u8(kChannelEof).u32(remote_channel_);
    wire_.send_packet(eof.bytes());
    send_channel_close();
    closing_ = true;
    if (!reason.empty()) closing_reason_ = std::string(reason);
    drain_until_close();
  }

  /// Gives the client a moment to answer our CHANNEL_CLOSE.
  void drain_until_close() {
    auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(2);
    try {
      while (std::chrono::steady_clock::now() < deadline) {
        if (!wire_.wait_readable(kTick)) continue;
        Bytes p = wire_.read_packet();
        if (!p.empty() && (p[0] == kChannelClose || p[0] == kDisconnect)) return;
      }
    } catch (...) {
    }
  }

  PacketChannel wire_;
  Engine& engine_;
  const TransportBinding& binding_;
  const SshHostKey& key_;
  ShellSession shell_;

  bool authenticated_ = false;
  int password_attempts_ = 0;
  bool channel_open_ = false;
  bool shell_started_ = false;
  bool pty_ = false;
  bool sent_close_ = false;
  bool closing_ = false;
  std::string closing_reason_ = "exit";
  std::uint32_t remote_channel_ = 0;
  std::uint32_t remote_window_ = 0;
  std::uint32_t remote_max_packet_ = kMaxPacket;
  std::uint32_t local_window_ = kWindow;

  std::string line_;
  bool last_cr_ = false;
  int escape_ = 0;
};

}  // namespace

void run_ssh_session(int fd, Engine& engine, const TransportBinding& binding, const SshHostKey& host_key,
                     std::string session_id, std::string peer, const std::atomic<bool>& stopping) {
  SshConnection conn(fd, engine, binding, host_key, std::move(session_id), std::move(peer), stopping);
  conn.run();
}

}  // namespace decoysh
