#ifndef PEMA_PROTOCOL_H
#define PEMA_PROTOCOL_H

#include <atomic>
#include <cstdint>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "pema/errors.h"
#include "pema/external_memory.h"
#include "pema/toy_plm.h"

// Owner/client wire protocol. Frames are a 4-byte big-endian length followed
// by a JSON object with a "kind" field. Float arrays travel as base64 of
// little-endian f32.
//
//   hello  -> {kind, version, d, v, head_checksum (16 hex digits)}
//   encode {tokens, top_k?} -> {kind, representation, log_probs, predicted[, top_ids]}
//   head   -> {kind, rows, cols, data}
//   other  -> {kind: "error", message}
namespace pema::protocol {

inline constexpr int kVersion = 1;
inline constexpr std::uint16_t kDefaultPort = 7478;
inline constexpr std::size_t kMaxFrame = std::size_t{1} << 20;

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);  // ProtocolError on bad input

std::string pack_f32(std::span<const double> values);
std::string pack_f32(std::span<const float> values);
std::vector<float> unpack_f32(std::string_view text);

// Blocking frame I/O on a connected socket. read_frame returns nullopt on a
// clean close before any header byte.
void write_frame(int fd, std::string_view payload);
std::optional<std::string> read_frame(int fd);

// Raised by read_frame when the announced length exceeds kMaxFrame.
class OversizedFrame : public ProtocolError {
 public:
  explicit OversizedFrame(std::size_t length)
      : ProtocolError("frame of " + std::to_string(length) + " bytes exceeds the 1 MiB limit"),
        length_(length) {}
  std::size_t length() const { return length_; }

 private:
  std::size_t length_;
};

// One server-to-client payload as seen on the wire.
struct CaptureEntry {
  std::string kind;
  std::vector<std::string> fields;
  std::size_t bytes = 0;
};

struct ServerOptions {
  std::string bind_address = "127.0.0.1";
  std::uint16_t port = kDefaultPort;  // 0 picks a free port
};

// Owner side. Shares the frozen PLM read-only across connections; each
// connection gets its own thread and is served in request order.
class Server {
 public:
  Server(const ToyPLM& plm, const ServerOptions& options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  std::uint16_t port() const { return port_; }

  void start();  // accept loop on a background thread
  void run();    // accept loop on the calling thread, until stop()
  void stop();

  // Response for one request payload; malformed input becomes an error reply.
  std::string handle(std::string_view request) const;

  std::vector<CaptureEntry> capture() const;
  std::size_t connections() const { return connections_.load(); }

 private:
  void accept_loop();
  void serve_connection(int fd);
  void send(int fd, const std::string& payload);

  const ToyPLM& plm_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::atomic<std::size_t> connections_{0};
  std::thread acceptor_;

  mutable std::mutex mu_;
  std::vector<std::thread> workers_;
  std::vector<int> open_fds_;
  std::vector<CaptureEntry> capture_;
};

struct SessionInfo {
  int version = 0;
  std::size_t d = 0;
  std::size_t v = 0;
  std::uint64_t head_checksum = 0;
  std::size_t requests = 0;
  std::size_t responses = 0;
};

struct EncodeReply {
  std::vector<float> representation;
  std::vector<double> log_probs;  // size v; -inf outside top_ids in top-k mode
  std::vector<TokenId> top_ids;   // empty for full distributions
  TokenId predicted = 0;
};

// Data-owner side. Transport failures raise TransportError; well-formed error
// replies and schema violations raise ProtocolError.
class Client {
 public:
  Client(const std::string& host, std::uint16_t port);
  ~Client();
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;

  const SessionInfo& hello();
  EncodeReply encode(std::span<const TokenId> tokens, std::size_t top_k = 0);
  // Throws IntegrityError when the data does not match the hello checksum.
  Matrix fetch_head();

  // Sends an arbitrary payload and returns the raw response.
  std::string request(std::string_view payload);

  const SessionInfo& session() const { return session_; }
  void close();

 private:
  int fd_ = -1;
  SessionInfo session_;
  bool have_hello_ = false;
};

// ContextEncoder backed by a remote owner. P_LM is rebuilt from the wire
// log-probabilities; in top-k mode the remaining mass is spread evenly over
// the other tokens.
class RemoteEncoder final : public ContextEncoder {
 public:
  explicit RemoteEncoder(Client& client, std::size_t top_k = 0);
  EncodeResult encode(std::span<const TokenId> context) override;
  std::size_t representation_size() const override { return d_; }
  std::size_t vocab_size() const override { return v_; }

 private:
  Client& client_;
  std::size_t top_k_;
  std::size_t d_;
  std::size_t v_;
};

// Raised when the connection drops during a remote memory build.
class PartialBuildError : public TransportError {
 public:
  PartialBuildError(const std::string& what, std::optional<std::uint32_t> last_sentence)
      : TransportError(what), last_sentence_(last_sentence) {}
  std::optional<std::uint32_t> last_completed_sentence() const { return last_sentence_; }

 private:
  std::optional<std::uint32_t> last_sentence_;
};

ExternalMemory remote_build_memory(Client& client, const Vocab& vocab, const PromptTemplate& tmpl,
                                   std::span<const ParallelPair> pairs,
                                   BuildMode mode = BuildMode::kPredicted);

}  // namespace pema::protocol

#endif  // PEMA_PROTOCOL_H
