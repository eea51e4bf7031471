#include "deid/modelwire.hpp"

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cstring>
#include <thread>

extern char** environ;

namespace deid::wire {

namespace {

constexpr std::uint8_t kMagic[4] = {'G', 'M', 'W', '1'};
constexpr std::size_t kHeaderSize = 9;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

std::string dims_text(const std::vector<std::uint32_t>& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
    return s + "]";
}

void ignore_sigpipe() {
    static std::once_flag once;
    std::call_once(once, [] { ::signal(SIGPIPE, SIG_IGN); });
}

}  // namespace

std::string to_string(MsgType t) {
    switch (t) {
        case MsgType::Hello: return "HELLO";
        case MsgType::ForwardReq: return "FORWARD_REQ";
        case MsgType::ForwardResp: return "FORWARD_RESP";
        case MsgType::VjpReq: return "VJP_REQ";
        case MsgType::VjpResp: return "VJP_RESP";
        case MsgType::Error: return "ERROR";
        case MsgType::Shutdown: return "SHUTDOWN";
    }
    return "UNKNOWN";
}

bool is_known_type(std::uint8_t t) { return t >= 0x01 && t <= 0x07; }

std::vector<std::uint8_t> encode_frame(const Frame& f) {
    if (f.payload.size() > kMaxPayload) throw ProtocolError("frame payload too large");
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    out.reserve(kHeaderSize + f.payload.size());
    out.push_back(static_cast<std::uint8_t>(f.type));
    put_u32(out, static_cast<std::uint32_t>(f.payload.size()));
    out.insert(out.end(), f.payload.begin(), f.payload.end());
    return out;
}

namespace {

// Validates a header and returns (type, payload length).
std::pair<MsgType, std::uint32_t> parse_header(const std::uint8_t* h) {
    if (std::memcmp(h, kMagic, 4) != 0) throw ProtocolError("bad frame magic");
    if (!is_known_type(h[4])) throw ProtocolError("unknown message type " + std::to_string(h[4]));
    const std::uint32_t len = get_u32(h + 5);
    if (len > kMaxPayload) throw ProtocolError("frame payload length " + std::to_string(len) + " exceeds limit");
    return {static_cast<MsgType>(h[4]), len};
}

}  // namespace

Frame decode_frame(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kHeaderSize) throw ProtocolError("truncated frame header");
    const auto [type, len] = parse_header(bytes.data());
    if (bytes.size() - kHeaderSize != len)
        throw ProtocolError("payload length " + std::to_string(bytes.size() - kHeaderSize) +
                            " does not match header length " + std::to_string(len));
    return {type, {bytes.begin() + kHeaderSize, bytes.end()}};
}

std::size_t WireTensor::element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return dims.empty() ? 0 : n;
}

void WireTensor::validate() const {
    if (dims.empty() || dims.size() > 255) throw ProtocolError("tensor must have between 1 and 255 dims");
    for (auto d : dims)
        if (d == 0) throw ProtocolError("zero-length tensor " + dims_text(dims));
    if (data.size() != element_count())
        throw ProtocolError("tensor data holds " + std::to_string(data.size()) + " values but dims " +
                            dims_text(dims) + " need " + std::to_string(element_count()));
}

void encode_tensor(const WireTensor& t, std::vector<std::uint8_t>& out) {
    t.validate();
    out.push_back(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) put_u32(out, d);
    for (float v : t.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

WireTensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
    auto need = [&](std::size_t n) {
        if (bytes.size() - offset < n) throw ProtocolError("truncated tensor");
    };
    need(1);
    WireTensor t;
    const std::size_t ndim = bytes[offset++];
    if (ndim == 0) throw ProtocolError("tensor must have at least 1 dim");
    need(4 * ndim);
    std::size_t count = 1;
    for (std::size_t i = 0; i < ndim; ++i, offset += 4) {
        t.dims.push_back(get_u32(bytes.data() + offset));
        if (t.dims.back() == 0) throw ProtocolError("zero-length tensor " + dims_text(t.dims));
        count *= t.dims.back();
        if (count > kMaxPayload / 4) throw ProtocolError("tensor too large");
    }
    need(4 * count);
    t.data.resize(count);
    for (std::size_t i = 0; i < count; ++i, offset += 4) t.data[i] = std::bit_cast<float>(get_u32(bytes.data() + offset));
    return t;
}

std::vector<WireTensor> decode_tensors(std::span<const std::uint8_t> payload, std::size_t count) {
    std::vector<WireTensor> out;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < count; ++i) out.push_back(decode_tensor(payload, offset));
    if (offset != payload.size()) throw ProtocolError("trailing bytes after tensor payload");
    return out;
}

WireTensor tensor_from_image(const Image& img) {
    WireTensor t;
    t.dims = {static_cast<std::uint32_t>(img.height()), static_cast<std::uint32_t>(img.width()),
              static_cast<std::uint32_t>(img.channels())};
    t.data.assign(img.values().begin(), img.values().end());
    return t;
}

Image image_from_tensor(const WireTensor& t) {
    t.validate();
    if (t.dims.size() != 3) throw ProtocolError("image tensor needs 3 dims, got " + dims_text(t.dims));
    std::vector<double> v(t.data.begin(), t.data.end());
    return Image(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]), static_cast<int>(t.dims[2]), std::move(v));
}

WireTensor tensor_from_values(std::span<const double> v) {
    WireTensor t;
    t.dims = {static_cast<std::uint32_t>(v.size())};
    t.data.assign(v.begin(), v.end());
    return t;
}

std::vector<double> values_from_tensor(const WireTensor& t) {
    t.validate();
    return {t.data.begin(), t.data.end()};
}

std::vector<std::uint8_t> hello_request_payload(std::uint32_t version) {
    std::vector<std::uint8_t> p;
    put_u32(p, version);
    return p;
}

std::uint32_t parse_hello_request(std::span<const std::uint8_t> payload) {
    if (payload.size() != 4) throw ProtocolError("HELLO request payload must be a 4-byte version");
    return get_u32(payload.data());
}

FdChannel::FdChannel(int read_fd, int write_fd, bool owns) : read_fd_(read_fd), write_fd_(write_fd), owns_(owns) {
    ignore_sigpipe();
}

FdChannel::~FdChannel() { close(); }

void FdChannel::close() {
    if (read_fd_ < 0) return;
    if (owns_) {
        ::close(read_fd_);
        if (write_fd_ != read_fd_) ::close(write_fd_);
    }
    read_fd_ = write_fd_ = -1;
}

void FdChannel::write_all(std::span<const std::uint8_t> bytes) {
    if (write_fd_ < 0) throw ChannelError("channel closed");
    std::size_t done = 0;
    while (done < bytes.size()) {
        const ssize_t n = ::write(write_fd_, bytes.data() + done, bytes.size() - done);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw ChannelError(errno_text("write to model channel failed"));
        }
        done += static_cast<std::size_t>(n);
    }
}

void FdChannel::read_exact(std::span<std::uint8_t> buf, std::chrono::milliseconds timeout) {
    if (read_fd_ < 0) throw ChannelError("channel closed");
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::size_t done = 0;
    while (done < buf.size()) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) throw TimeoutError("timed out waiting for model response");
        pollfd p{read_fd_, POLLIN, 0};
        const int r = ::poll(&p, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
        if (r < 0) {
            if (errno == EINTR) continue;
            throw ChannelError(errno_text("poll on model channel failed"));
        }
        if (r == 0) throw TimeoutError("timed out waiting for model response");
        const ssize_t n = ::read(read_fd_, buf.data() + done, buf.size() - done);
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) continue;
            throw ChannelError(errno_text("read from model channel failed"));
        }
        if (n == 0) throw ChannelError("model channel closed by peer");
        done += static_cast<std::size_t>(n);
    }
}

ProcessChannel::ProcessChannel(const std::string& command) {
    ignore_sigpipe();
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0) throw ChannelError(errno_text("pipe"));
    if (::pipe(from_child) != 0) {
        ::close(to_child[0]);
        ::close(to_child[1]);
        throw ChannelError(errno_text("pipe"));
    }
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, to_child[0], STDIN_FILENO);
    posix_spawn_file_actions_adddup2(&actions, from_child[1], STDOUT_FILENO);
    for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) posix_spawn_file_actions_addclose(&actions, fd);

    std::string sh = "/bin/sh", flag = "-c", cmd = command;
    char* argv[] = {sh.data(), flag.data(), cmd.data(), nullptr};
    const int rc = posix_spawn(&pid_, "/bin/sh", &actions, nullptr, argv, environ);
    posix_spawn_file_actions_destroy(&actions);
    ::close(to_child[0]);
    ::close(from_child[1]);
    if (rc != 0) {
        ::close(to_child[1]);
        ::close(from_child[0]);
        throw ChannelError("cannot start model process '" + command + "': " + std::strerror(rc));
    }
    fd_ = std::make_unique<FdChannel>(from_child[0], to_child[1]);
}

ProcessChannel::~ProcessChannel() { close(); }

void ProcessChannel::close() {
    fd_->close();
    if (pid_ < 0) return;
    int status = 0;
    for (int i = 0; i < 200; ++i) {
        const pid_t r = ::waitpid(pid_, &status, WNOHANG);
        if (r == pid_) {
            status_ = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
            pid_ = -1;
            return;
        }
        if (r < 0) {
            pid_ = -1;
            return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, &status, 0);
    status_ = 128 + SIGKILL;
    pid_ = -1;
}

std::unique_ptr<Channel> connect_tcp(const std::string& host, std::uint16_t port) {
    ignore_sigpipe();
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
    if (rc != 0) throw ChannelError("cannot resolve " + host + ": " + gai_strerror(rc));
    int fd = -1;
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
        fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw ChannelError("cannot connect to " + host + ":" + std::to_string(port));
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return std::make_unique<FdChannel>(fd, fd);
}

std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> channel_pair() {
    ignore_sigpipe();
    int sv[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM, 0, sv) != 0) throw ChannelError(errno_text("socketpair"));
    return {std::make_unique<FdChannel>(sv[0], sv[0]), std::make_unique<FdChannel>(sv[1], sv[1])};
}

void write_frame(Channel& ch, const Frame& f) { ch.write_all(encode_frame(f)); }

Frame read_frame(Channel& ch, std::chrono::milliseconds timeout) {
    std::uint8_t header[kHeaderSize];
    ch.read_exact(header, timeout);
    const auto [type, len] = parse_header(header);
    Frame f{type, std::vector<std::uint8_t>(len)};
    if (len) ch.read_exact(f.payload, timeout);
    return f;
}

WireClient::WireClient(std::unique_ptr<Channel> channel, std::chrono::milliseconds timeout)
    : channel_(std::move(channel)), timeout_(timeout) {
    if (!channel_) throw ChannelError("null channel");
}

WireClient::~WireClient() = default;

bool WireClient::is_open() const {
    std::lock_guard lock(mutex_);
    return channel_->is_open();
}

Frame WireClient::exchange(const Frame& request, MsgType expected) {
    if (!channel_->is_open()) throw ChannelError("channel closed");
    try {
        write_frame(*channel_, request);
        Frame resp = read_frame(*channel_, timeout_);
        if (resp.type == MsgType::Error) {
            const std::string msg(resp.payload.begin(), resp.payload.end());
            throw RemoteError(msg.empty() ? "remote error" : msg);
        }
        if (resp.type != expected)
            throw ProtocolError("expected " + to_string(expected) + " but received " + to_string(resp.type));
        return resp;
    } catch (const ProtocolError&) {
        channel_->close();
        throw;
    } catch (const TimeoutError&) {
        // A late reply would desynchronize request/response pairing.
        channel_->close();
        throw;
    }
}

ModelSpec WireClient::handshake(std::uint32_t version) {
    std::lock_guard lock(mutex_);
    Frame resp;
    try {
        resp = exchange({MsgType::Hello, hello_request_payload(version)}, MsgType::Hello);
    } catch (const RemoteError& e) {
        if (std::string(e.what()).find("version") != std::string::npos) throw VersionError(e.what());
        throw;
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(resp.payload.begin(), resp.payload.end());
    } catch (const nlohmann::json::exception& e) {
        channel_->close();
        throw ProtocolError(std::string("malformed model spec in HELLO: ") + e.what());
    }
    if (!j.is_object()) {
        channel_->close();
        throw ProtocolError("malformed model spec in HELLO: not a JSON object");
    }
    const auto served = j.value("protocol_version", kProtocolVersion);
    if (served != version)
        throw VersionError("protocol version mismatch: client " + std::to_string(version) + ", server " +
                           std::to_string(served));
    try {
        spec_ = model_spec_from_json(j);
    } catch (const ModelError& e) {
        channel_->close();
        throw ProtocolError(e.what());
    }
    return *spec_;
}

WireTensor WireClient::forward(const WireTensor& input) {
    std::lock_guard lock(mutex_);
    if (!spec_) throw WireError("forward before handshake");
    Frame req{MsgType::ForwardReq, {}};
    encode_tensor(input, req.payload);
    const Frame resp = exchange(req, MsgType::ForwardResp);
    try {
        return decode_tensors(resp.payload, 1).front();
    } catch (const ProtocolError&) {
        channel_->close();
        throw;
    }
}

WireTensor WireClient::vjp(const WireTensor& primal, const WireTensor& cotangent) {
    std::lock_guard lock(mutex_);
    if (!spec_) throw WireError("vjp before handshake");
    Frame req{MsgType::VjpReq, {}};
    encode_tensor(primal, req.payload);
    encode_tensor(cotangent, req.payload);
    const Frame resp = exchange(req, MsgType::VjpResp);
    try {
        return decode_tensors(resp.payload, 1).front();
    } catch (const ProtocolError&) {
        channel_->close();
        throw;
    }
}

void WireClient::shutdown() {
    std::lock_guard lock(mutex_);
    if (!channel_->is_open()) return;
    try {
        write_frame(*channel_, {MsgType::Shutdown, {}});
    } catch (const ChannelError&) {
    }
    channel_->close();
}

namespace {

ModelSpec require_spec(const std::shared_ptr<WireClient>& client, bool generator) {
    if (!client) throw WireError("null wire client");
    if (!client->spec()) throw WireError("wire client has not completed the handshake");
    const ModelSpec& s = *client->spec();
    if (generator != (s.role == ModelRole::Generator))
        throw ModelError("remote model has role " + to_string(s.role) + ", expected " +
                         (generator ? "generator" : "an extractor"));
    return s;
}

void expect_dims(const WireTensor& t, const std::vector<int>& shape, const char* what) {
    std::vector<std::uint32_t> want(shape.begin(), shape.end());
    if (t.dims != want)
        throw ProtocolError(std::string(what) + " has dims " + dims_text(t.dims) + ", expected " + dims_text(want));
}

}  // namespace

RemoteGenerator::RemoteGenerator(std::shared_ptr<WireClient> client)
    : client_(std::move(client)), spec_(require_spec(client_, true)) {}

Image RemoteGenerator::forward(const LatentVector& z) const {
    if (z.size() != static_cast<std::size_t>(spec_.latent_dim))
        throw ModelError("latent has " + std::to_string(z.size()) + " values, generator expects " +
                         std::to_string(spec_.latent_dim));
    const WireTensor out = client_->forward(tensor_from_values(z.values));
    expect_dims(out, spec_.output_shape, "generator output");
    return image_from_tensor(out);
}

std::vector<double> RemoteGenerator::vjp(const LatentVector& z, const Image& cotangent) const {
    const WireTensor out = client_->vjp(tensor_from_values(z.values), tensor_from_image(cotangent));
    expect_dims(out, spec_.input_shape, "generator gradient");
    return values_from_tensor(out);
}

RemoteExtractor::RemoteExtractor(std::shared_ptr<WireClient> client)
    : client_(std::move(client)), spec_(require_spec(client_, false)) {}

FeatureVector RemoteExtractor::forward(const Image& img) const {
    const WireTensor out = client_->forward(tensor_from_image(img));
    expect_dims(out, spec_.output_shape, "extractor output");
    return {values_from_tensor(out), feature_role()};
}

Image RemoteExtractor::vjp(const Image& img, std::span<const double> cotangent) const {
    const WireTensor out = client_->vjp(tensor_from_image(img), tensor_from_values(cotangent));
    expect_dims(out, spec_.input_shape, "extractor gradient");
    return image_from_tensor(out);
}

}  // namespace deid::wire
