#include "wire_server.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <stdexcept>

namespace testserver {

using namespace deid::wire;

namespace {

std::string dims_text(const std::vector<std::uint32_t>& d) {
    std::string s = "[";
    for (std::size_t i = 0; i < d.size(); ++i) s += (i ? "," : "") + std::to_string(d[i]);
    return s + "]";
}

std::vector<std::uint32_t> as_dims(const std::vector<int>& shape) { return {shape.begin(), shape.end()}; }

Frame error_frame(const std::string& msg) { return {MsgType::Error, {msg.begin(), msg.end()}}; }

class Model {
public:
    explicit Model(const deid::ModelSpec& spec) {
        if (spec.role == deid::ModelRole::Generator) gen_ = deid::make_toy_generator(spec);
        else ex_ = deid::make_toy_extractor(spec);
    }

    WireTensor forward(const WireTensor& in) const {
        if (gen_) return tensor_from_image(gen_->forward({values_from_tensor(in)}));
        return tensor_from_values(ex_->forward(image_from_tensor(in)).values);
    }

    WireTensor vjp(const WireTensor& primal, const WireTensor& cot) const {
        if (gen_) return tensor_from_values(gen_->vjp({values_from_tensor(primal)}, image_from_tensor(cot)));
        const auto c = values_from_tensor(cot);
        return tensor_from_image(ex_->vjp(image_from_tensor(primal), c));
    }

private:
    std::shared_ptr<const deid::Generator> gen_;
    std::shared_ptr<const deid::Extractor> ex_;
};

}  // namespace

int serve(Channel& ch, const ServedModel& served, std::ostream* log) {
    const Model model(served.spec);
    const auto in_dims = as_dims(served.spec.input_shape);
    const auto out_dims = as_dims(served.spec.output_shape);
    bool greeted = false;
    for (;;) {
        Frame req;
        try {
            req = read_frame(ch, std::chrono::hours(1));
        } catch (const ProtocolError& e) {
            if (log) *log << "malformed frame: " << e.what() << "\n";
            try {
                write_frame(ch, error_frame(std::string("malformed frame: ") + e.what()));
            } catch (const WireError&) {
            }
            return 1;
        } catch (const WireError&) {
            return 1;
        }
        if (log) *log << to_string(req.type) << "\n";
        Frame resp;
        try {
            switch (req.type) {
                case MsgType::Hello: {
                    const auto v = parse_hello_request(req.payload);
                    if (v != served.version) {
                        resp = error_frame("protocol version mismatch: client " + std::to_string(v) + ", server " +
                                           std::to_string(served.version));
                        break;
                    }
                    auto j = deid::to_json(served.spec);
                    j["protocol_version"] = served.version;
                    const std::string text = j.dump();
                    resp = {MsgType::Hello, {text.begin(), text.end()}};
                    greeted = true;
                    break;
                }
                case MsgType::ForwardReq: {
                    if (!greeted) {
                        resp = error_frame("handshake required");
                        break;
                    }
                    const auto t = decode_tensors(req.payload, 1);
                    if (t[0].dims != in_dims) {
                        resp = error_frame("input dims " + dims_text(t[0].dims) + " do not match expected " +
                                           dims_text(in_dims));
                        break;
                    }
                    resp.type = MsgType::ForwardResp;
                    encode_tensor(model.forward(t[0]), resp.payload);
                    break;
                }
                case MsgType::VjpReq: {
                    if (!greeted) {
                        resp = error_frame("handshake required");
                        break;
                    }
                    if (!served.vjp) {
                        resp = error_frame("vjp unsupported");
                        break;
                    }
                    const auto t = decode_tensors(req.payload, 2);
                    if (t[0].dims != in_dims || t[1].dims != out_dims) {
                        resp = error_frame("vjp dims " + dims_text(t[0].dims) + " and " + dims_text(t[1].dims) +
                                           " do not match expected " + dims_text(in_dims) + " and " +
                                           dims_text(out_dims));
                        break;
                    }
                    resp.type = MsgType::VjpResp;
                    encode_tensor(model.vjp(t[0], t[1]), resp.payload);
                    break;
                }
                case MsgType::Shutdown:
                    return 0;
                default:
                    resp = error_frame("unexpected message type " + to_string(req.type));
            }
        } catch (const std::exception& e) {
            resp = error_frame(e.what());
        }
        try {
            write_frame(ch, resp);
        } catch (const WireError&) {
            return 1;
        }
    }
}

ThreadServer::ThreadServer(ServedModel model) {
    auto [a, b] = channel_pair();
    client_ = std::move(a);
    server_ = std::move(b);
    thread_ = std::thread([this, model] {
        code_ = serve(*server_, model);
        server_->close();
    });
}

ThreadServer::~ThreadServer() {
    if (client_) client_->close();
    if (thread_.joinable()) thread_.join();
}

std::unique_ptr<Channel> ThreadServer::take_client() { return std::move(client_); }

int ThreadServer::exit_code() {
    if (thread_.joinable()) thread_.join();
    return code_;
}

TcpServer::TcpServer(ServedModel model, std::uint16_t port) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw std::runtime_error("socket failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 1) != 0)
        throw std::runtime_error("cannot listen on port " + std::to_string(port));
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    thread_ = std::thread([this, model] {
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) return;
        FdChannel ch(fd, fd);
        serve(ch, model);
    });
}

void TcpServer::wait() {
    if (thread_.joinable()) thread_.join();
}

TcpServer::~TcpServer() {
    ::shutdown(listen_fd_, SHUT_RDWR);
    if (thread_.joinable()) thread_.join();
    ::close(listen_fd_);
}

}  // namespace testserver
