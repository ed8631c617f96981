#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cmath>
#include <set>
#include <thread>

#include <gtest/gtest.h>
#include <json.hpp>

#include "oracles.h"
#include "pema/protocol.h"

namespace pema {
namespace {

using namespace protocol;
using testing::small_plm;
using testing::small_task;

ServerOptions any_port() {
  ServerOptions o;
  o.port = 0;
  return o;
}

class ProtocolTest : public ::testing::Test {
 protected:
  void SetUp() override {
    server_ = std::make_unique<Server>(small_plm(), any_port());
    server_->start();
  }
  void TearDown() override { server_->stop(); }

  std::unique_ptr<Client> connect() { return std::make_unique<Client>("127.0.0.1", server_->port()); }

  std::unique_ptr<Server> server_;
};

std::vector<TokenId> prompt(std::size_t i) {
  return assemble_prompt(default_vocab(), PromptTemplate{}, small_task()[i].source).tokens;
}

// Raw TCP connection for malformed traffic.
int raw_connect(std::uint16_t port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(fd);
    return -1;
  }
  return fd;
}

TEST_F(ProtocolTest, HelloEchoesModelShape) {
  auto client = connect();
  const auto& s = client->hello();
  EXPECT_EQ(s.version, kVersion);
  EXPECT_EQ(s.d, 16u);
  EXPECT_EQ(s.v, 68u);
  EXPECT_EQ(s.head_checksum, small_plm().head_checksum());
}

TEST_F(ProtocolTest, EncodeEqualsLocalAfterFloatRounding) {
  auto client = connect();
  client->hello();
  for (std::size_t i = 0; i < 10; ++i) {
    const auto ctx = prompt(i);
    const auto remote = client->encode(ctx);
    const auto local = small_plm().encode(ctx);
    ASSERT_EQ(remote.representation.size(), local.representation.size());
    for (std::size_t j = 0; j < local.representation.size(); ++j) {
      EXPECT_EQ(remote.representation[j], static_cast<float>(local.representation[j]));
    }
    EXPECT_EQ(remote.predicted, local.predicted);
    ASSERT_EQ(remote.log_probs.size(), 68u);
    for (std::size_t t = 0; t < 68; ++t) {
      EXPECT_NEAR(std::exp(remote.log_probs[t]), local.next_token[t],
                  1e-6 * std::max(local.next_token[t], 1e-3));
    }
  }
}

TEST_F(ProtocolTest, IdenticalRequestsGiveIdenticalResponses) {
  auto client = connect();
  nlohmann::json req{{"kind", "encode"}, {"tokens", prompt(3)}};
  EXPECT_EQ(client->request(req.dump()), client->request(req.dump()));
}

TEST_F(ProtocolTest, ErrorRepliesKeepTheConnection) {
  auto client = connect();
  const auto message = [&](const std::string& payload) {
    const auto j = nlohmann::json::parse(client->request(payload));
    EXPECT_EQ(j["kind"], "error");
    return j["message"].get<std::string>();
  };
  EXPECT_EQ(message(R"({"kind":"train"})"), "unsupported");
  EXPECT_EQ(message(R"({"kind":"encode","tokens":[]})"), "empty token list");
  EXPECT_EQ(message(R"({"kind":"encode","tokens":[1,999]})"), "token id out of range");
  EXPECT_EQ(message("not json"), "malformed request");
  EXPECT_EQ(message(R"([1,2,3])"), "malformed request");
  EXPECT_EQ(client->hello().d, 16u);  // still usable
  EXPECT_THROW(client->encode({}), ProtocolError);
}

TEST_F(ProtocolTest, FetchedHeadMatchesChecksumAndDistribution) {
  auto client = connect();
  client->hello();
  const Matrix head = client->fetch_head();
  EXPECT_EQ(float32_checksum(head.data()), client->session().head_checksum);
  EXPECT_EQ(head, small_plm().head());
  EXPECT_EQ(client->fetch_head(), head);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto reply = client->encode(prompt(i));
    const std::vector<double> f(reply.representation.begin(), reply.representation.end());
    const auto p = softmax(matvec(head, f));
    for (std::size_t t = 0; t < 68; ++t) {
      EXPECT_NEAR(p[t], std::exp(reply.log_probs[t]), 1e-6);
    }
  }
}

TEST_F(ProtocolTest, RemoteMemoryFileIsByteIdenticalToLocal) {
  auto client = connect();
  client->hello();
  const std::size_t before = client->session().requests;
  const auto remote = remote_build_memory(*client, default_vocab(), PromptTemplate{}, small_task());
  std::size_t targets = 0;
  for (const auto& p : small_task()) targets += p.target.size();
  EXPECT_EQ(client->session().requests - before, targets);

  const auto local = build_memory(small_plm(), default_vocab(), PromptTemplate{}, small_task());
  testing::TempDir dir;
  write_memory(remote, dir.file("remote.pema"));
  write_memory(local, dir.file("local.pema"));
  EXPECT_EQ(testing::read_bytes(dir.file("remote.pema")),
            testing::read_bytes(dir.file("local.pema")));
}

TEST_F(ProtocolTest, TeacherModeAlsoMatches) {
  auto client = connect();
  const std::vector<ParallelPair> pairs(small_task().begin(), small_task().begin() + 10);
  EXPECT_EQ(remote_build_memory(*client, default_vocab(), PromptTemplate{}, pairs,
                                BuildMode::kTeacher),
            build_memory(small_plm(), default_vocab(), PromptTemplate{}, pairs,
                         BuildMode::kTeacher));
}

TEST_F(ProtocolTest, CaptureShowsOnlyAllowedPayloads) {
  {
    auto client = connect();
    client->hello();
    client->fetch_head();
    client->encode(prompt(0));
    client->encode(prompt(0), 5);
    client->request(R"({"kind":"train"})");
    client->request(R"({"kind":"weights"})");
  }
  const std::set<std::string> allowed_fields{"kind",        "version", "d",     "v",
                                             "head_checksum", "rows",  "cols",  "data",
                                             "representation", "log_probs", "predicted",
                                             "top_ids",     "message"};
  const std::set<std::string> allowed_kinds{"hello", "head", "encode", "error"};
  std::size_t head_bytes = 0;
  for (const auto& e : server_->capture()) {
    EXPECT_TRUE(allowed_kinds.count(e.kind)) << e.kind;
    for (const auto& f : e.fields) EXPECT_TRUE(allowed_fields.count(f)) << f;
    if (e.kind == "head") head_bytes += e.bytes;
  }
  // The one head reply carries v*d floats in base64 plus a small envelope.
  const std::size_t head_floats = 68 * 16;
  EXPECT_GE(head_bytes, head_floats * 4 * 4 / 3);
  EXPECT_LT(head_bytes, head_floats * 4 * 4 / 3 + 200);
}

TEST_F(ProtocolTest, TopKRepliesAndRemoteEncoder) {
  auto client = connect();
  client->hello();
  const auto reply = client->encode(prompt(2), 5);
  ASSERT_EQ(reply.top_ids.size(), 5u);
  std::size_t finite = 0;
  for (double lp : reply.log_probs) finite += std::isfinite(lp) ? 1 : 0;
  EXPECT_EQ(finite, 5u);
  const auto local = small_plm().encode(prompt(2));
  EXPECT_EQ(reply.top_ids[0], local.predicted);

  RemoteEncoder topk(*client, 5);
  const auto enc = topk.encode(prompt(2));
  double sum = 0.0;
  for (double p : enc.next_token.probs()) sum += p;
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_EQ(enc.next_token.argmax(), local.predicted);

  RemoteEncoder full(*client);
  const auto f = full.encode(prompt(2));
  for (std::size_t t = 0; t < 68; ++t) EXPECT_NEAR(f.next_token[t], local.next_token[t], 1e-6);
}

TEST_F(ProtocolTest, OversizedFrameGetsAnErrorThenClose) {
  const int fd = raw_connect(server_->port());
  ASSERT_GE(fd, 0);
  const unsigned char header[4] = {0x00, 0x20, 0x00, 0x00};  // 2 MiB
  ASSERT_EQ(::send(fd, header, 4, 0), 4);
  const auto reply = read_frame(fd);
  ASSERT_TRUE(reply.has_value());
  EXPECT_EQ(nlohmann::json::parse(*reply)["kind"], "error");
  EXPECT_FALSE(read_frame(fd).has_value());
  ::close(fd);
}

TEST_F(ProtocolTest, ServesSeveralConnections) {
  auto a = connect();
  auto b = connect();
  EXPECT_EQ(a->encode(prompt(1)).representation, b->encode(prompt(1)).representation);
  EXPECT_GE(server_->connections(), 2u);
}

TEST(ProtocolServerTest, UnfrozenModelAndBadAddressAreRejected) {
  PLMConfig cfg;
  cfg.d = 8;
  cfg.hidden = 8;
  const ToyPLM fresh = ToyPLM::initialize(cfg);
  EXPECT_THROW(Server(fresh, any_port()), ContractError);
  ServerOptions bad = any_port();
  bad.bind_address = "not-an-address";
  EXPECT_THROW(Server(small_plm(), bad), ConfigError);
}

TEST(ProtocolServerTest, HandleIsPureRequestResponse) {
  Server server(small_plm(), any_port());
  const auto j = nlohmann::json::parse(server.handle(R"({"kind":"hello"})"));
  EXPECT_EQ(j["d"], 16);
  EXPECT_EQ(j["head_checksum"].get<std::string>().size(), 16u);
}

TEST(ProtocolClientTest, ConnectFailureIsATransportError) {
  std::uint16_t port;
  {
    Server s(small_plm(), any_port());
    port = s.port();
  }
  EXPECT_THROW(Client("127.0.0.1", port), TransportError);
}

// Owner stand-in that answers faithfully, then drops the connection after a
// fixed number of encode requests.
class DroppingOwner {
 public:
  explicit DroppingOwner(std::size_t encodes) : server_(small_plm(), any_port()) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = 0;
    ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
    ::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
    ::listen(listen_fd_, 1);
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    thread_ = std::thread([this, encodes] {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      std::size_t seen = 0;
      while (auto req = read_frame(fd)) {
        if (nlohmann::json::parse(*req)["kind"] == "encode" && seen++ == encodes) break;
        write_frame(fd, server_.handle(*req));
      }
      ::close(fd);
    });
  }
  ~DroppingOwner() {
    thread_.join();
    ::close(listen_fd_);
  }
  std::uint16_t port() const { return port_; }

 private:
  Server server_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::thread thread_;
};

TEST(ProtocolClientTest, DisconnectMidBuildNamesLastCompletedSentence) {
  const auto& pairs = small_task();
  const std::size_t encodes = pairs[0].target.size() + pairs[1].target.size() + 1;
  DroppingOwner owner(encodes);
  Client client("127.0.0.1", owner.port());
  try {
    remote_build_memory(client, default_vocab(), PromptTemplate{}, pairs);
    FAIL() << "expected a partial build";
  } catch (const PartialBuildError& e) {
    ASSERT_TRUE(e.last_completed_sentence().has_value());
    EXPECT_EQ(*e.last_completed_sentence(), pairs[1].id);
  }
}

TEST(ProtocolClientTest, DisconnectBeforeAnySentence) {
  DroppingOwner owner(0);
  Client client("127.0.0.1", owner.port());
  try {
    remote_build_memory(client, default_vocab(), PromptTemplate{}, small_task());
    FAIL() << "expected a partial build";
  } catch (const PartialBuildError& e) {
    EXPECT_FALSE(e.last_completed_sentence().has_value());
  }
}

TEST(Base64Test, KnownVectorsAndRoundTrip) {
  const auto enc = [](std::string_view s) {
    return base64_encode({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  };
  EXPECT_EQ(enc(""), "");
  EXPECT_EQ(enc("M"), "TQ==");
  EXPECT_EQ(enc("Ma"), "TWE=");
  EXPECT_EQ(enc("Man"), "TWFu");
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::uint8_t> bytes(rng.below(100));
    for (auto& b : bytes) b = static_cast<std::uint8_t>(rng.below(256));
    EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
  }
  EXPECT_THROW(base64_decode("abc"), ProtocolError);
  EXPECT_THROW(base64_decode("ab!d"), ProtocolError);
  EXPECT_THROW(base64_decode("a=bc"), ProtocolError);
}

TEST(PackTest, FloatsSurviveExactly) {
  const std::vector<float> values{0.0f, -1.5f, 3.14159f, 1e-30f};
  EXPECT_EQ(unpack_f32(pack_f32(std::span<const float>(values))), values);
  const std::vector<double> d{0.1, -2.0};
  const auto back = unpack_f32(pack_f32(std::span<const double>(d)));
  EXPECT_EQ(back[0], 0.1f);
  EXPECT_EQ(back[1], -2.0f);
  EXPECT_THROW(unpack_f32(base64_encode(std::vector<std::uint8_t>{1, 2, 3})), ProtocolError);
}

TEST(FrameTest, RoundTripOverASocketPair) {
  int fds[2];
  ASSERT_EQ(::socketpair(AF_UNIX, SOCK_STREAM, 0, fds), 0);
  write_frame(fds[0], "hello there");
  write_frame(fds[0], "");
  EXPECT_EQ(read_frame(fds[1]), "hello there");
  EXPECT_EQ(read_frame(fds[1]), "");
  const char partial[2] = {0, 0};
  ASSERT_EQ(::write(fds[0], partial, 2), 2);
  ::close(fds[0]);
  EXPECT_THROW(read_frame(fds[1]), TransportError);
  ::close(fds[1]);
}

}  // namespace
}  // namespace pema
