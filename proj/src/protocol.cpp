#include "pema/protocol.h"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "pema/log.h"

namespace pema::protocol {

namespace {

using nlohmann::json;

constexpr std::string_view kAlphabet =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string errno_text() { return std::strerror(errno); }

void send_all(int fd, const char* data, std::size_t n) {
  while (n > 0) {
    const ssize_t w = ::send(fd, data, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw TransportError("send failed: " + errno_text());
    }
    data += w;
    n -= static_cast<std::size_t>(w);
  }
}

// Bytes actually read; short only at end of stream.
std::size_t recv_all(int fd, char* data, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t r = ::recv(fd, data + got, n - got, 0);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw TransportError("receive failed: " + errno_text());
    }
    if (r == 0) break;
    got += static_cast<std::size_t>(r);
  }
  return got;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

json error_reply(const std::string& message) {
  return json{{"kind", "error"}, {"message", message}};
}

json parse_reply(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("unparseable reply: ") + e.what());
  }
  if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string()) {
    throw ProtocolError("reply without a kind");
  }
  if (j["kind"] == "error") {
    throw ProtocolError("server error: " + j.value("message", std::string("(no message)")));
  }
  return j;
}

template <typename T>
T field(const json& j, const char* name) {
  if (!j.contains(name)) throw ProtocolError(std::string("reply lacks field '") + name + "'");
  try {
    return j[name].get<T>();
  } catch (const json::exception&) {
    throw ProtocolError(std::string("reply field '") + name + "' has the wrong type");
  }
}

void expect_kind(const json& j, std::string_view kind) {
  if (j["kind"] != kind) {
    throw ProtocolError("expected a " + std::string(kind) + " reply, got " +
                        j["kind"].get<std::string>());
  }
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= bytes.size(); i += 3) {
    const std::uint32_t n = (std::uint32_t{bytes[i]} << 16) | (std::uint32_t{bytes[i + 1]} << 8) |
                            bytes[i + 2];
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += kAlphabet[(n >> 6) & 63];
    out += kAlphabet[n & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest > 0) {
    std::uint32_t n = std::uint32_t{bytes[i]} << 16;
    if (rest == 2) n |= std::uint32_t{bytes[i + 1]} << 8;
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += rest == 2 ? kAlphabet[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw ProtocolError("base64 length is not a multiple of 4");
  std::array<int, 256> value;
  value.fill(-1);
  for (std::size_t i = 0; i < kAlphabet.size(); ++i) {
    value[static_cast<unsigned char>(kAlphabet[i])] = static_cast<int>(i);
  }
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const bool last = i + 4 == text.size();
    int pad = 0;
    std::uint32_t n = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const char c = text[i + k];
      int v = 0;
      if (c == '=' && last && k >= 2) {
        ++pad;
      } else {
        if (pad > 0) throw ProtocolError("base64 data after padding");
        v = value[static_cast<unsigned char>(c)];
        if (v < 0) throw ProtocolError("invalid base64 character");
      }
      n = (n << 6) | static_cast<std::uint32_t>(v);
    }
    out.push_back(static_cast<std::uint8_t>(n >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(n >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(n));
  }
  return out;
}

std::string pack_f32(std::span<const float> values) {
  std::vector<std::uint8_t> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &values[i], 4);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return base64_encode(bytes);
}

std::string pack_f32(std::span<const double> values) {
  std::vector<float> f(values.begin(), values.end());
  return pack_f32(std::span<const float>(f));
}

std::vector<float> unpack_f32(std::string_view text) {
  const auto bytes = base64_decode(text);
  if (bytes.size() % 4 != 0) throw ProtocolError("f32 payload length is not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= std::uint32_t{bytes[i * 4 + b]} << (8 * b);
    std::memcpy(&out[i], &bits, 4);
  }
  return out;
}

void write_frame(int fd, std::string_view payload) {
  const auto n = static_cast<std::uint32_t>(payload.size());
  const std::array<char, 4> header{static_cast<char>(n >> 24), static_cast<char>(n >> 16),
                                   static_cast<char>(n >> 8), static_cast<char>(n)};
  send_all(fd, header.data(), header.size());
  send_all(fd, payload.data(), payload.size());
}

std::optional<std::string> read_frame(int fd) {
  std::array<unsigned char, 4> header{};
  const std::size_t got = recv_all(fd, reinterpret_cast<char*>(header.data()), header.size());
  if (got == 0) return std::nullopt;
  if (got < header.size()) throw TransportError("connection closed inside a frame header");
  const std::size_t n = (std::size_t{header[0]} << 24) | (std::size_t{header[1]} << 16) |
                        (std::size_t{header[2]} << 8) | header[3];
  if (n > kMaxFrame) throw OversizedFrame(n);
  std::string payload(n, '\0');
  if (recv_all(fd, payload.data(), n) < n) {
    throw TransportError("connection closed inside a frame body");
  }
  return payload;
}

// ---------------------------------------------------------------- server

namespace {

json respond(const ToyPLM& plm, std::string_view request) {
  json req;
  try {
    req = json::parse(request);
  } catch (const json::exception&) {
    return error_reply("malformed request");
  }
  if (!req.is_object() || !req.contains("kind") || !req["kind"].is_string()) {
    return error_reply("malformed request");
  }
  const std::string kind = req["kind"];
  const auto& cfg = plm.config();

  if (kind == "hello") {
    return json{{"kind", "hello"},
                {"version", kVersion},
                {"d", cfg.d},
                {"v", cfg.v},
                {"head_checksum", hex64(plm.head_checksum())}};
  }

  if (kind == "head") {
    return json{{"kind", "head"},
                {"rows", plm.head().rows()},
                {"cols", plm.head().cols()},
                {"data", pack_f32(plm.head().data())}};
  }

  if (kind == "encode") {
    if (!req.contains("tokens") || !req["tokens"].is_array()) {
      return error_reply("encode needs a token list");
    }
    std::vector<TokenId> tokens;
    for (const auto& t : req["tokens"]) {
      if (!t.is_number_unsigned() || t.get<std::uint64_t>() >= cfg.v) {
        return error_reply("token id out of range");
      }
      tokens.push_back(t.get<TokenId>());
    }
    if (tokens.empty()) return error_reply("empty token list");
    std::size_t top_k = 0;
    if (req.contains("top_k")) {
      if (!req["top_k"].is_number_unsigned()) return error_reply("top_k must be a count");
      top_k = req["top_k"].get<std::size_t>();
    }

    const EncodeResult enc = plm.encode(tokens);
    std::vector<double> log_probs(cfg.v);
    for (std::size_t i = 0; i < cfg.v; ++i) {
      log_probs[i] = std::log(std::max(enc.next_token[i], kProbabilityFloor));
    }
    json reply{{"kind", "encode"},
               {"representation", pack_f32(enc.representation)},
               {"predicted", enc.predicted}};
    if (top_k > 0 && top_k < cfg.v) {
      std::vector<TokenId> ids(cfg.v);
      std::iota(ids.begin(), ids.end(), TokenId{0});
      std::stable_sort(ids.begin(), ids.end(),
                       [&](TokenId a, TokenId b) { return log_probs[a] > log_probs[b]; });
      ids.resize(top_k);
      std::vector<double> top;
      for (TokenId id : ids) top.push_back(log_probs[id]);
      reply["top_ids"] = ids;
      reply["log_probs"] = pack_f32(top);
    } else {
      reply["log_probs"] = pack_f32(log_probs);
    }
    return reply;
  }

  return error_reply("unsupported");
}

}  // namespace

Server::Server(const ToyPLM& plm, const ServerOptions& options) : plm_(plm) {
  if (!plm.frozen()) throw ContractError("the owner service needs a frozen PLM");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(options.port);
  if (::inet_pton(AF_INET, options.bind_address.c_str(), &addr.sin_addr) != 1) {
    throw ConfigError("invalid bind address '" + options.bind_address + "'");
  }
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw TransportError("socket failed: " + errno_text());
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(listen_fd_, 16) != 0) {
    const std::string why = errno_text();
    ::close(listen_fd_);
    throw TransportError("cannot listen on " + options.bind_address + ":" +
                         std::to_string(options.port) + ": " + why);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  log::info("owner service listening on " + options.bind_address + ":" + std::to_string(port_));
}

Server::~Server() { stop(); }

void Server::start() { acceptor_ = std::thread([this] { accept_loop(); }); }

void Server::run() { accept_loop(); }

void Server::stop() {
  if (stopping_.exchange(true)) return;
  if (listen_fd_ >= 0) {
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
  }
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::thread> workers;
  {
    std::lock_guard lock(mu_);
    for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
    workers.swap(workers_);
  }
  for (auto& t : workers) t.join();
}

void Server::accept_loop() {
  while (!stopping_) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR && !stopping_) continue;
      break;
    }
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::lock_guard lock(mu_);
    if (stopping_) {
      ::close(fd);
      break;
    }
    ++connections_;
    open_fds_.push_back(fd);
    workers_.emplace_back([this, fd] { serve_connection(fd); });
  }
}

std::string Server::handle(std::string_view request) const {
  return respond(plm_, request).dump();
}

void Server::send(int fd, const std::string& payload) {
  write_frame(fd, payload);
}

void Server::serve_connection(int fd) {
  const auto reply = [&](const json& j) {
    const std::string text = j.dump();
    CaptureEntry entry{j["kind"].get<std::string>(), {}, text.size() + 4};
    for (const auto& item : j.items()) entry.fields.push_back(item.key());
    {
      std::lock_guard lock(mu_);
      capture_.push_back(std::move(entry));
    }
    send(fd, text);
  };
  try {
    while (true) {
      std::optional<std::string> request;
      try {
        request = read_frame(fd);
      } catch (const OversizedFrame& e) {
        reply(error_reply(e.what()));
        break;
      }
      if (!request) break;
      reply(respond(plm_, *request));
    }
  } catch (const std::exception& e) {
    log::debug(std::string("connection ended: ") + e.what());
  }
  std::lock_guard lock(mu_);
  open_fds_.erase(std::remove(open_fds_.begin(), open_fds_.end(), fd), open_fds_.end());
  ::close(fd);
}

std::vector<CaptureEntry> Server::capture() const {
  std::lock_guard lock(mu_);
  return capture_;
}

// ---------------------------------------------------------------- client

Client::Client(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string service = std::to_string(port);
  if (const int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0) {
    throw TransportError("cannot resolve " + host + ": " + ::gai_strerror(rc));
  }
  std::string why = "no address";
  for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
    const int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) {
      fd_ = fd;
      break;
    }
    why = errno_text();
    ::close(fd);
  }
  ::freeaddrinfo(res);
  if (fd_ < 0) throw TransportError("cannot connect to " + host + ":" + service + ": " + why);
  const int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

Client::~Client() { close(); }

void Client::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

std::string Client::request(std::string_view payload) {
  if (fd_ < 0) throw TransportError("client is not connected");
  write_frame(fd_, payload);
  ++session_.requests;
  auto reply = read_frame(fd_);
  if (!reply) throw TransportError("connection closed by the server");
  ++session_.responses;
  return std::move(*reply);
}

const SessionInfo& Client::hello() {
  const json j = parse_reply(request(json{{"kind", "hello"}}.dump()));
  expect_kind(j, "hello");
  const int version = field<int>(j, "version");
  if (version != kVersion) {
    throw ProtocolError("server speaks protocol version " + std::to_string(version) +
                        ", expected " + std::to_string(kVersion));
  }
  session_.version = version;
  session_.d = field<std::size_t>(j, "d");
  session_.v = field<std::size_t>(j, "v");
  const auto hex = field<std::string>(j, "head_checksum");
  try {
    std::size_t used = 0;
    session_.head_checksum = std::stoull(hex, &used, 16);
    if (used != hex.size()) throw std::invalid_argument(hex);
  } catch (const std::logic_error&) {
    throw ProtocolError("malformed head checksum '" + hex + "'");
  }
  have_hello_ = true;
  return session_;
}

EncodeReply Client::encode(std::span<const TokenId> tokens, std::size_t top_k) {
  if (!have_hello_) hello();
  json req{{"kind", "encode"}, {"tokens", std::vector<TokenId>(tokens.begin(), tokens.end())}};
  if (top_k > 0) req["top_k"] = top_k;
  const json j = parse_reply(request(req.dump()));
  expect_kind(j, "encode");

  EncodeReply out;
  out.representation = unpack_f32(field<std::string>(j, "representation"));
  if (out.representation.size() != session_.d) {
    throw ProtocolError("representation of width " + std::to_string(out.representation.size()) +
                        " in a session with d=" + std::to_string(session_.d));
  }
  const auto lp = unpack_f32(field<std::string>(j, "log_probs"));
  out.predicted = field<TokenId>(j, "predicted");
  if (out.predicted >= session_.v) throw ProtocolError("predicted token outside the vocabulary");
  if (j.contains("top_ids")) {
    out.top_ids = field<std::vector<TokenId>>(j, "top_ids");
    if (out.top_ids.size() != lp.size()) throw ProtocolError("top-k ids and log-probs disagree");
    out.log_probs.assign(session_.v, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < lp.size(); ++i) {
      if (out.top_ids[i] >= session_.v) throw ProtocolError("top-k id outside the vocabulary");
      out.log_probs[out.top_ids[i]] = lp[i];
    }
  } else {
    if (lp.size() != session_.v) throw ProtocolError("log-prob vector has the wrong length");
    out.log_probs.assign(lp.begin(), lp.end());
  }
  return out;
}

Matrix Client::fetch_head() {
  if (!have_hello_) hello();
  const json j = parse_reply(request(json{{"kind", "head"}}.dump()));
  expect_kind(j, "head");
  const auto rows = field<std::size_t>(j, "rows");
  const auto cols = field<std::size_t>(j, "cols");
  const auto data = unpack_f32(field<std::string>(j, "data"));
  if (rows != session_.v || cols != session_.d || data.size() != rows * cols) {
    throw ProtocolError("head shape does not match the session");
  }
  Matrix head(rows, cols, std::vector<double>(data.begin(), data.end()));
  if (float32_checksum(head.data()) != session_.head_checksum) {
    throw IntegrityError("head checksum mismatch: announced " + hex64(session_.head_checksum) +
                         ", received " + hex64(float32_checksum(head.data())));
  }
  return head;
}

RemoteEncoder::RemoteEncoder(Client& client, std::size_t top_k)
    : client_(client), top_k_(top_k) {
  const SessionInfo& s = client_.session().version == 0 ? client_.hello() : client_.session();
  d_ = s.d;
  v_ = s.v;
}

EncodeResult RemoteEncoder::encode(std::span<const TokenId> context) {
  const EncodeReply reply = client_.encode(context, top_k_);
  EncodeResult out;
  out.representation.assign(reply.representation.begin(), reply.representation.end());
  out.predicted = reply.predicted;

  std::vector<double> probs(v_, 0.0);
  double kept = 0.0;
  for (std::size_t i = 0; i < v_; ++i) {
    if (std::isfinite(reply.log_probs[i])) {
      probs[i] = std::exp(reply.log_probs[i]);
      kept += probs[i];
    }
  }
  if (!reply.top_ids.empty() && reply.top_ids.size() < v_) {
    const double rest = std::max(0.0, 1.0 - kept) / static_cast<double>(v_ - reply.top_ids.size());
    for (std::size_t i = 0; i < v_; ++i) {
      if (!std::isfinite(reply.log_probs[i])) probs[i] = rest;
    }
  }
  const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  for (double& p : probs) p /= total;
  out.next_token = TokenDistribution(std::move(probs));
  return out;
}

ExternalMemory remote_build_memory(Client& client, const Vocab& vocab, const PromptTemplate& tmpl,
                                   std::span<const ParallelPair> pairs, BuildMode mode) {
  RemoteEncoder encoder(client);
  std::optional<std::uint32_t> last;
  try {
    return build_memory_serial(encoder, vocab, tmpl, pairs, mode,
                               [&](std::uint32_t id) { last = id; });
  } catch (const TransportError& e) {
    const std::string where = last ? "after sentence " + std::to_string(*last)
                                   : std::string("before the first sentence completed");
    throw PartialBuildError("memory build interrupted " + where + ": " + e.what(), last);
  }
}

}  // namespace pema::protocol
