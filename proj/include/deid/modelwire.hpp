#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deid/diffmodel.hpp"

namespace deid::wire {

constexpr std::uint32_t kProtocolVersion = 1;
constexpr std::uint32_t kMaxPayload = 1u << 30;
constexpr std::chrono::milliseconds kDefaultTimeout{10000};

struct WireError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Malformed frames or tensors. The client closes its channel after one.
struct ProtocolError : WireError {
    using WireError::WireError;
};
// The peer answered with an ERROR frame.
struct RemoteError : WireError {
    using WireError::WireError;
};
struct VersionError : WireError {
    using WireError::WireError;
};
struct TimeoutError : WireError {
    using WireError::WireError;
};
// The channel is closed or the peer went away.
struct ChannelError : WireError {
    using WireError::WireError;
};

enum class MsgType : std::uint8_t {
    Hello = 0x01,
    ForwardReq = 0x02,
    ForwardResp = 0x03,
    VjpReq = 0x04,
    VjpResp = 0x05,
    Error = 0x06,
    Shutdown = 0x07,
};

std::string to_string(MsgType t);
bool is_known_type(std::uint8_t t);

struct Frame {
    MsgType type = MsgType::Hello;
    std::vector<std::uint8_t> payload;
};

// "GMW1", u8 type, u32 LE payload length, payload.
std::vector<std::uint8_t> encode_frame(const Frame& f);
// Decodes exactly one frame occupying the whole buffer.
Frame decode_frame(std::span<const std::uint8_t> bytes);

struct WireTensor {
    std::vector<std::uint32_t> dims;
    std::vector<float> data;  // row-major

    std::size_t element_count() const;
    void validate() const;  // nonempty dims, no zero extent, data matches dims
};

// u8 ndim, ndim x u32 LE dims, f32 LE data.
void encode_tensor(const WireTensor& t, std::vector<std::uint8_t>& out);
WireTensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset);
// Decodes a payload that holds exactly `count` tensors back to back.
std::vector<WireTensor> decode_tensors(std::span<const std::uint8_t> payload, std::size_t count);

WireTensor tensor_from_image(const Image& img);
Image image_from_tensor(const WireTensor& t);
WireTensor tensor_from_values(std::span<const double> v);
std::vector<double> values_from_tensor(const WireTensor& t);

std::vector<std::uint8_t> hello_request_payload(std::uint32_t version);
std::uint32_t parse_hello_request(std::span<const std::uint8_t> payload);

// A bidirectional byte stream.
class Channel {
public:
    virtual ~Channel() = default;
    virtual void write_all(std::span<const std::uint8_t> bytes) = 0;
    // Fills `buf` completely or throws TimeoutError / ChannelError.
    virtual void read_exact(std::span<std::uint8_t> buf, std::chrono::milliseconds timeout) = 0;
    virtual void close() = 0;
    virtual bool is_open() const = 0;
};

// Reads from one descriptor and writes to another (they may be the same socket).
class FdChannel : public Channel {
public:
    FdChannel(int read_fd, int write_fd, bool owns = true);
    ~FdChannel() override;
    FdChannel(const FdChannel&) = delete;
    FdChannel& operator=(const FdChannel&) = delete;

    void write_all(std::span<const std::uint8_t> bytes) override;
    void read_exact(std::span<std::uint8_t> buf, std::chrono::milliseconds timeout) override;
    void close() override;
    bool is_open() const override { return read_fd_ >= 0; }

private:
    int read_fd_;
    int write_fd_;
    bool owns_;
};

// Runs `command` through /bin/sh and talks to it over its stdin and stdout.
// The child's stderr is inherited. Closing waits briefly for the child, then kills it.
class ProcessChannel final : public Channel {
public:
    explicit ProcessChannel(const std::string& command);
    ~ProcessChannel() override;

    void write_all(std::span<const std::uint8_t> bytes) override { fd_->write_all(bytes); }
    void read_exact(std::span<std::uint8_t> buf, std::chrono::milliseconds timeout) override {
        fd_->read_exact(buf, timeout);
    }
    void close() override;
    bool is_open() const override { return fd_->is_open(); }
    // Exit status of the child once it has been reaped.
    std::optional<int> exit_status() const { return status_; }

private:
    std::unique_ptr<FdChannel> fd_;
    int pid_ = -1;
    std::optional<int> status_;
};

std::unique_ptr<Channel> connect_tcp(const std::string& host, std::uint16_t port);

// Creates a connected socket pair; useful for serving a model from a thread.
std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> channel_pair();

void write_frame(Channel& ch, const Frame& f);
Frame read_frame(Channel& ch, std::chrono::milliseconds timeout);

// Strictly alternating request/response client; one request in flight at a time.
class WireClient {
public:
    explicit WireClient(std::unique_ptr<Channel> channel, std::chrono::milliseconds timeout = kDefaultTimeout);
    ~WireClient();

    ModelSpec handshake(std::uint32_t version = kProtocolVersion);
    WireTensor forward(const WireTensor& input);
    WireTensor vjp(const WireTensor& primal, const WireTensor& cotangent);
    // Sends SHUTDOWN and closes the channel. No response is expected.
    void shutdown();

    const std::optional<ModelSpec>& spec() const { return spec_; }
    bool is_open() const;

private:
    Frame exchange(const Frame& request, MsgType expected);

    std::unique_ptr<Channel> channel_;
    std::chrono::milliseconds timeout_;
    std::optional<ModelSpec> spec_;
    mutable std::mutex mutex_;
};

// Model adapters that forward every call over a handshaken client.
class RemoteGenerator final : public Generator {
public:
    explicit RemoteGenerator(std::shared_ptr<WireClient> client);
    const ModelSpec& spec() const override { return spec_; }
    Image forward(const LatentVector& z) const override;
    std::vector<double> vjp(const LatentVector& z, const Image& cotangent) const override;

private:
    std::shared_ptr<WireClient> client_;
    ModelSpec spec_;
};

class RemoteExtractor final : public Extractor {
public:
    explicit RemoteExtractor(std::shared_ptr<WireClient> client);
    const ModelSpec& spec() const override { return spec_; }
    FeatureVector forward(const Image& img) const override;
    Image vjp(const Image& img, std::span<const double> cotangent) const override;

private:
    std::shared_ptr<WireClient> client_;
    ModelSpec spec_;
};

}  // namespace deid::wire
