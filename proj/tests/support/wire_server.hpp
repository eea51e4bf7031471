#pragma once

// Minimal model server speaking the wire protocol, backed by the in-process toy
// models. Used to exercise the client over socket pairs, pipes and TCP.

#include <cstdint>
#include <memory>
#include <ostream>
#include <thread>

#include "deid/modelwire.hpp"

namespace testserver {

struct ServedModel {
    deid::ModelSpec spec;
    bool vjp = true;
    std::uint32_t version = deid::wire::kProtocolVersion;
};

// Answers requests until SHUTDOWN (returns 0) or a broken channel (returns 1).
// Malformed frames get an ERROR reply, after which the stream is abandoned.
int serve(deid::wire::Channel& ch, const ServedModel& model, std::ostream* log = nullptr);

// Serves a model on one end of a socket pair from a background thread.
class ThreadServer {
public:
    explicit ThreadServer(ServedModel model);
    ~ThreadServer();
    // The client end; can be taken once.
    std::unique_ptr<deid::wire::Channel> take_client();
    int exit_code();  // joins

private:
    std::unique_ptr<deid::wire::Channel> client_;
    std::unique_ptr<deid::wire::Channel> server_;
    std::thread thread_;
    int code_ = -1;
};

// Listens on 127.0.0.1 (port 0 picks a free one) and serves one connection.
class TcpServer {
public:
    explicit TcpServer(ServedModel model, std::uint16_t port = 0);
    ~TcpServer();
    std::uint16_t port() const { return port_; }
    // Blocks until the served connection ends.
    void wait();

private:
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::thread thread_;
};

}  // namespace testserver
