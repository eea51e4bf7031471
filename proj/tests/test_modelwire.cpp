#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <thread>

#include "deid/modelwire.hpp"
#include "oracles.hpp"
#include "tempdir.hpp"
#include "wire_server.hpp"

using namespace deid;
using namespace deid::wire;

namespace {

using Bytes = std::vector<std::uint8_t>;

Bytes fixture(const std::string& name) { return testutil::read_bytes(std::filesystem::path(DEID_FIXTURE_DIR) / name); }

// Passes bytes through and keeps a copy of each direction.
class RecordingChannel final : public Channel {
public:
    explicit RecordingChannel(std::unique_ptr<Channel> inner, Bytes& written, Bytes& read)
        : inner_(std::move(inner)), written_(written), read_(read) {}
    void write_all(std::span<const std::uint8_t> b) override {
        written_.insert(written_.end(), b.begin(), b.end());
        inner_->write_all(b);
    }
    void read_exact(std::span<std::uint8_t> b, std::chrono::milliseconds t) override {
        inner_->read_exact(b, t);
        read_.insert(read_.end(), b.begin(), b.end());
    }
    void close() override { inner_->close(); }
    bool is_open() const override { return inner_->is_open(); }

private:
    std::unique_ptr<Channel> inner_;
    Bytes& written_;
    Bytes& read_;
};

testserver::ServedModel served_generator(std::uint64_t seed = 3) {
    return {ModelSpec::generator(6, 8, 8, 3, seed, 16)};
}

testserver::ServedModel served_extractor(std::uint64_t seed = 4) {
    return {ModelSpec::extractor(ModelRole::Identity, 8, 8, 3, 5, seed, 16, 12.0)};
}

std::string server_command(const std::string& args) { return std::string(DEID_TEST_SERVER) + " " + args; }

double max_abs(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("frame encoding") {
    const Frame hello{MsgType::Hello, hello_request_payload(1)};
    const Bytes expect{'G', 'M', 'W', '1', 0x01, 0x04, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00};
    CHECK(encode_frame(hello) == expect);
    const Frame back = decode_frame(expect);
    CHECK(back.type == MsgType::Hello);
    CHECK(parse_hello_request(back.payload) == 1);

    const Bytes empty = encode_frame({MsgType::Shutdown, {}});
    CHECK(empty == Bytes{'G', 'M', 'W', '1', 0x07, 0, 0, 0, 0});
    CHECK(decode_frame(empty).payload.empty());

    Bytes big_payload(70000);
    for (std::size_t i = 0; i < big_payload.size(); ++i) big_payload[i] = static_cast<std::uint8_t>(i * 31);
    const Bytes big = encode_frame({MsgType::ForwardResp, big_payload});
    CHECK(big[5] == 0x70);
    CHECK(big[6] == 0x11);
    CHECK(big[7] == 0x01);
    CHECK(decode_frame(big).payload == big_payload);

    for (std::uint8_t t = 1; t <= 7; ++t) CHECK(is_known_type(t));
    CHECK_FALSE(is_known_type(0));
    CHECK_FALSE(is_known_type(8));
    CHECK(to_string(MsgType::VjpResp) == "VJP_RESP");
}

TEST_CASE("malformed frames are rejected") {
    Bytes bad_magic{'G', 'M', 'W', '2', 0x01, 0, 0, 0, 0};
    CHECK_THROWS_AS(decode_frame(bad_magic), ProtocolError);
    Bytes unknown{'G', 'M', 'W', '1', 0x09, 0, 0, 0, 0};
    CHECK_THROWS_WITH_AS(decode_frame(unknown), doctest::Contains("unknown message type 9"), ProtocolError);
    Bytes zero_type{'G', 'M', 'W', '1', 0x00, 0, 0, 0, 0};
    CHECK_THROWS_AS(decode_frame(zero_type), ProtocolError);
    Bytes short_payload{'G', 'M', 'W', '1', 0x02, 4, 0, 0, 0, 1, 2};
    CHECK_THROWS_AS(decode_frame(short_payload), ProtocolError);
    Bytes header_only{'G', 'M', 'W', '1', 0x02};
    CHECK_THROWS_AS(decode_frame(header_only), ProtocolError);
    Bytes huge{'G', 'M', 'W', '1', 0x02, 0xff, 0xff, 0xff, 0xff};
    CHECK_THROWS_AS(decode_frame(huge), ProtocolError);
    CHECK_THROWS_AS(parse_hello_request(Bytes{1, 0, 0}), ProtocolError);
}

TEST_CASE("tensor encoding") {
    const WireTensor t{{2, 3}, {1.0f, -2.0f, 0.5f, 0.0f, 3.25f, -0.125f}};
    Bytes out;
    encode_tensor(t, out);
    REQUIRE(out.size() == 1 + 2 * 4 + 6 * 4);
    CHECK(out[0] == 2);
    CHECK(Bytes(out.begin() + 1, out.begin() + 9) == Bytes{2, 0, 0, 0, 3, 0, 0, 0});
    // 1.0f = 0x3f800000 little-endian
    CHECK(Bytes(out.begin() + 9, out.begin() + 13) == Bytes{0x00, 0x00, 0x80, 0x3f});
    // -2.0f = 0xc0000000
    CHECK(Bytes(out.begin() + 13, out.begin() + 17) == Bytes{0x00, 0x00, 0x00, 0xc0});
    std::size_t offset = 0;
    const WireTensor back = decode_tensor(out, offset);
    CHECK(offset == out.size());
    CHECK(back.dims == t.dims);
    CHECK(back.data == t.data);

    Bytes two = out;
    two.insert(two.end(), out.begin(), out.end());
    CHECK(decode_tensors(two, 2).size() == 2);
    CHECK_THROWS_AS(decode_tensors(two, 1), ProtocolError);
    CHECK_THROWS_AS(decode_tensors(out, 2), ProtocolError);

    Bytes zero_extent{2, 2, 0, 0, 0, 0, 0, 0, 0};
    offset = 0;
    CHECK_THROWS_WITH_AS(decode_tensor(zero_extent, offset), doctest::Contains("zero-length"), ProtocolError);
    Bytes no_dims{0};
    offset = 0;
    CHECK_THROWS_AS(decode_tensor(no_dims, offset), ProtocolError);
    Bytes truncated(out.begin(), out.end() - 1);
    offset = 0;
    CHECK_THROWS_AS(decode_tensor(truncated, offset), ProtocolError);
    Bytes enc;
    CHECK_THROWS_AS(encode_tensor(WireTensor{{0}, {}}, enc), ProtocolError);
    CHECK_THROWS_AS(encode_tensor(WireTensor{{2}, {1.0f}}, enc), ProtocolError);

    const Image img = oracle::random_image(3, 4, 3, 1);
    const WireTensor it = tensor_from_image(img);
    CHECK(it.dims == std::vector<std::uint32_t>{3, 4, 3});
    const Image round = image_from_tensor(it);
    CHECK(oracle::max_abs_difference(img, round) <= 6e-8);
    CHECK_THROWS_AS(image_from_tensor(WireTensor{{4}, {1, 2, 3, 4}}), ProtocolError);
    const std::vector<double> v{0.1, 0.2};
    CHECK(values_from_tensor(tensor_from_values(v)) == std::vector<double>{0.1f, 0.2f});
}

TEST_CASE("recorded exchange matches the golden bytes") {
    testserver::ThreadServer server({ModelSpec::generator(2, 1, 1, 1, 7, 2)});
    Bytes written, read;
    WireClient client(std::make_unique<RecordingChannel>(server.take_client(), written, read));
    const ModelSpec spec = client.handshake();
    CHECK(spec.latent_dim == 2);
    const WireTensor out = client.forward(WireTensor{{2}, {0.5f, -0.25f}});
    client.shutdown();
    CHECK(server.exit_code() == 0);

    CHECK(written == fixture("wire_client_to_server.bin"));
    CHECK(read == fixture("wire_server_to_client.bin"));

    const auto local = make_toy_generator(ModelSpec::generator(2, 1, 1, 1, 7, 2));
    CHECK(out.data[0] == static_cast<float>(local->forward({{0.5, -0.25}}).values()[0]));
}

TEST_CASE("handshake over a socket pair, a child process and TCP") {
    const auto expected = served_generator().spec;
    SUBCASE("socket pair") {
        testserver::ThreadServer server(served_generator());
        WireClient client(server.take_client());
        const ModelSpec s = client.handshake();
        CHECK(s.input_shape == expected.input_shape);
        CHECK(s.output_shape == expected.output_shape);
        CHECK(s.seed == expected.seed);
        client.shutdown();
        CHECK_FALSE(client.is_open());
        CHECK(server.exit_code() == 0);
    }
    SUBCASE("child process") {
        auto channel = std::make_unique<ProcessChannel>(
            server_command("--role generator --latent-dim 6 --image-size 8 --hidden 16 --seed 3 2>/dev/null"));
        ProcessChannel* raw = channel.get();
        WireClient client(std::move(channel));
        const ModelSpec s = client.handshake();
        CHECK(s.output_shape == expected.output_shape);
        CHECK(s.hidden == 16);
        client.shutdown();
        REQUIRE(raw->exit_status().has_value());
        CHECK(*raw->exit_status() == 0);
    }
    SUBCASE("tcp") {
        testserver::TcpServer server(served_generator());
        WireClient client(connect_tcp("127.0.0.1", server.port()));
        CHECK(client.handshake().latent_dim == 6);
        client.shutdown();
    }
}

TEST_CASE("protocol version mismatch") {
    {
        testserver::ServedModel m = served_generator();
        m.version = 2;
        testserver::ThreadServer server(m);
        WireClient client(server.take_client());
        CHECK_THROWS_WITH_AS(client.handshake(), doctest::Contains("client 1, server 2"), VersionError);
    }
    {
        testserver::ThreadServer server(served_generator());
        WireClient client(server.take_client());
        CHECK_THROWS_AS(client.handshake(2), VersionError);
    }
}

TEST_CASE("remote models agree with in-process models") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> uni(-1.0, 1.0);

    SUBCASE("generator") {
        const auto served = served_generator();
        testserver::ThreadServer server(served);
        auto client = std::make_shared<WireClient>(server.take_client());
        client->handshake();
        const RemoteGenerator remote(client);
        const auto local = make_toy_generator(served.spec);
        double worst_forward = 0, worst_vjp = 0;
        for (int k = 0; k < 50; ++k) {
            LatentVector z{std::vector<double>(6)};
            for (double& v : z.values) v = normal(rng);
            const Image a = remote.forward(z), b = local->forward(z);
            worst_forward = std::max(worst_forward, oracle::max_abs_difference(a, b));
        }
        for (int k = 0; k < 50; ++k) {
            LatentVector z{std::vector<double>(6)};
            for (double& v : z.values) v = normal(rng);
            Image c(8, 8, 3);
            for (double& v : c.values()) v = uni(rng);
            worst_vjp = std::max(worst_vjp, max_abs(remote.vjp(z, c), local->vjp(z, c)));
        }
        INFO("forward " << worst_forward << ", vjp " << worst_vjp);
        CHECK(worst_forward <= 1e-6);
        CHECK(worst_vjp <= 1e-6);
        client->shutdown();
    }
    SUBCASE("extractor in a child process") {
        auto client = std::make_shared<WireClient>(std::make_unique<ProcessChannel>(server_command(
            "--role identity --image-size 8 --features 5 --hidden 16 --seed 4 --gain 12 2>/dev/null")));
        client->handshake();
        const RemoteExtractor remote(client);
        const auto local = make_toy_extractor(served_extractor().spec);
        CHECK(remote.feature_role() == FeatureRole::Identity);
        double worst_forward = 0, worst_vjp = 0;
        for (int k = 0; k < 50; ++k) {
            const Image x = oracle::random_image(8, 8, 3, 500 + k);
            const auto a = remote.forward(x), b = local->forward(x);
            worst_forward = std::max(worst_forward, max_abs(a.values, b.values));
        }
        for (int k = 0; k < 50; ++k) {
            const Image x = oracle::random_image(8, 8, 3, 600 + k);
            std::vector<double> c(5);
            for (double& v : c) v = uni(rng);
            worst_vjp = std::max(worst_vjp, oracle::max_abs_difference(remote.vjp(x, c), local->vjp(x, c)));
        }
        INFO("forward " << worst_forward << ", vjp " << worst_vjp);
        // the extractor output is scaled by its gain of 12, so f32 rounding scales with it
        CHECK(worst_forward <= 12e-6);
        CHECK(worst_vjp <= 1e-6);
        client->shutdown();
    }
}

TEST_CASE("zero cotangent gives a zero gradient") {
    testserver::ThreadServer server(served_generator());
    auto client = std::make_shared<WireClient>(server.take_client());
    client->handshake();
    const RemoteGenerator remote(client);
    const auto g = remote.vjp({{0.1, -0.2, 0.3, 0.4, -0.5, 0.6}}, Image(8, 8, 3, 0.0));
    CHECK(g == std::vector<double>(6, 0.0));
}

TEST_CASE("server errors reach the client") {
    SUBCASE("wrong input dims") {
        testserver::ThreadServer server(served_generator());
        WireClient client(server.take_client());
        client.handshake();
        CHECK_THROWS_WITH_AS(client.forward(WireTensor{{3}, {1, 2, 3}}), doctest::Contains("expected [6]"),
                             RemoteError);
        // the connection stays usable after a remote error
        CHECK(client.forward(WireTensor{{6}, {0, 0, 0, 0, 0, 0}}).dims == std::vector<std::uint32_t>{8, 8, 3});
    }
    SUBCASE("vjp unsupported") {
        testserver::ServedModel m = served_generator();
        m.vjp = false;
        testserver::ThreadServer server(m);
        auto client = std::make_shared<WireClient>(server.take_client());
        client->handshake();
        const RemoteGenerator remote(client);
        CHECK_THROWS_WITH_AS(remote.vjp({std::vector<double>(6, 0.0)}, Image(8, 8, 3)),
                             doctest::Contains("vjp unsupported"), RemoteError);
        CHECK(remote.forward({std::vector<double>(6, 0.0)}).height() == 8);
    }
    SUBCASE("requests before the handshake") {
        testserver::ThreadServer server(served_generator());
        WireClient client(server.take_client());
        CHECK_THROWS_AS(client.forward(WireTensor{{6}, std::vector<float>(6)}), WireError);
        auto shared = std::make_shared<WireClient>(channel_pair().first);
        CHECK_THROWS_AS(RemoteGenerator{shared}, WireError);
    }
    SUBCASE("role mismatch") {
        testserver::ThreadServer server(served_extractor());
        auto client = std::make_shared<WireClient>(server.take_client());
        client->handshake();
        CHECK_THROWS_AS(RemoteGenerator{client}, ModelError);
        CHECK_NOTHROW(RemoteExtractor{client});
    }
    SUBCASE("local latent check") {
        testserver::ThreadServer server(served_generator());
        auto client = std::make_shared<WireClient>(server.take_client());
        client->handshake();
        CHECK_THROWS_AS(RemoteGenerator(client).forward({{1.0, 2.0}}), ModelError);
    }
}

TEST_CASE("misbehaving peers") {
    SUBCASE("silent peer times out") {
        auto [client_end, server_end] = channel_pair();
        WireClient client(std::move(client_end), std::chrono::milliseconds(50));
        const auto start = std::chrono::steady_clock::now();
        CHECK_THROWS_AS(client.handshake(), TimeoutError);
        CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(5));
        CHECK_FALSE(client.is_open());
        CHECK_THROWS_AS(client.handshake(), ChannelError);
    }
    SUBCASE("malformed spec") {
        auto [client_end, server_end] = channel_pair();
        std::thread peer([&ch = *server_end] {
            read_frame(ch, std::chrono::seconds(5));
            const std::string junk = "not json";
            write_frame(ch, {MsgType::Hello, {junk.begin(), junk.end()}});
        });
        WireClient client(std::move(client_end));
        CHECK_THROWS_WITH_AS(client.handshake(), doctest::Contains("malformed model spec"), ProtocolError);
        CHECK_FALSE(client.is_open());
        peer.join();
    }
    SUBCASE("unexpected response type") {
        auto [client_end, server_end] = channel_pair();
        std::thread peer([&ch = *server_end] {
            read_frame(ch, std::chrono::seconds(5));
            write_frame(ch, {MsgType::VjpResp, {}});
        });
        WireClient client(std::move(client_end));
        CHECK_THROWS_WITH_AS(client.handshake(), doctest::Contains("expected HELLO"), ProtocolError);
        peer.join();
    }
    SUBCASE("garbage bytes") {
        auto [client_end, server_end] = channel_pair();
        std::thread peer([&ch = *server_end] {
            read_frame(ch, std::chrono::seconds(5));
            const Bytes junk{'H', 'T', 'T', 'P', '/', '1', '.', '1', ' '};
            ch.write_all(junk);
        });
        WireClient client(std::move(client_end));
        CHECK_THROWS_WITH_AS(client.handshake(), doctest::Contains("magic"), ProtocolError);
        peer.join();
    }
    SUBCASE("peer hangs up") {
        auto [client_end, server_end] = channel_pair();
        server_end->close();
        WireClient client(std::move(client_end));
        CHECK_THROWS_AS(client.handshake(), ChannelError);
    }
    SUBCASE("malformed request gets an error reply") {
        testserver::ThreadServer server(served_generator());
        auto ch = server.take_client();
        const Bytes junk{'X', 'X', 'X', 'X', 0x01, 0, 0, 0, 0};
        ch->write_all(junk);
        const Frame reply = read_frame(*ch, std::chrono::seconds(5));
        CHECK(reply.type == MsgType::Error);
        CHECK(server.exit_code() == 1);
    }
    SUBCASE("process that cannot start") {
        auto ch = std::make_unique<ProcessChannel>("/nonexistent/model-server 2>/dev/null");
        WireClient client(std::move(ch), std::chrono::seconds(5));
        CHECK_THROWS_AS(client.handshake(), ChannelError);
    }
}
