// Stand-alone wire server for tests: serves one toy model over stdin/stdout or TCP.

#include <CLI11.hpp>

#include <iostream>

#include "wire_server.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Toy model server for wire protocol tests"};
    std::string role = "identity", transport = "stdio";
    std::uint64_t seed = 1;
    int latent_dim = 16, image_size = 16, channels = 3, features = 8, hidden = 32, port = 0;
    double gain = 1.0;
    bool no_vjp = false;
    std::uint32_t version = deid::wire::kProtocolVersion;
    app.add_option("--role", role)->check(CLI::IsMember({"generator", "perceptual", "identity"}));
    app.add_option("--transport", transport)->check(CLI::IsMember({"stdio", "tcp"}));
    app.add_option("--port", port);
    app.add_option("--seed", seed);
    app.add_option("--latent-dim", latent_dim);
    app.add_option("--image-size", image_size);
    app.add_option("--channels", channels);
    app.add_option("--features", features);
    app.add_option("--hidden", hidden);
    app.add_option("--gain", gain);
    app.add_flag("--no-vjp", no_vjp);
    app.add_option("--version", version);
    CLI11_PARSE(app, argc, argv);

    testserver::ServedModel m;
    const auto r = deid::parse_role(role);
    m.spec = r == deid::ModelRole::Generator
                 ? deid::ModelSpec::generator(latent_dim, image_size, image_size, channels, seed, hidden)
                 : deid::ModelSpec::extractor(r, image_size, image_size, channels, features, seed, hidden, gain);
    m.vjp = !no_vjp;
    m.version = version;

    if (transport == "tcp") {
        testserver::TcpServer server(m, static_cast<std::uint16_t>(port));
        std::cout << server.port() << std::endl;
        server.wait();
        return 0;
    }
    deid::wire::FdChannel ch(0, 1, false);
    return testserver::serve(ch, m, &std::cerr);
}
