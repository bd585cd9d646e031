#include <doctest.h>

#include <algorithm>
#include <set>

#include "qasf/errors.hpp"
#include "qasf/gradcheck.hpp"
#include "qasf/loss.hpp"
#include "qasf/serialize.hpp"
#include "qasf/split_client.hpp"
#include "qasf/split_ops.hpp"
#include "qasf/transport.hpp"
#include "support.hpp"

using namespace qasf;
using namespace qasf::split;
using nn::Tensor;

namespace {

SplitPartition small_unet(bool batchnorm = true, bool skips = true) {
  ArchConfig arch;
  arch.down_filters = {3, 4};
  arch.bottleneck_filters = 4;
  arch.batchnorm = batchnorm;
  arch.skip_connections = skips;
  return build_unet(arch, 8, 8);
}

struct Pipeline {
  FeForward fe;
  ServerForward server;
  BeForward be;
};

Pipeline run_forward(const SplitPartition& p, const PartParams& params, const Tensor& x,
                     std::span<const std::uint8_t> labels, const Round& round = {1, 1, 1, 0}) {
  auto fe = client_forward_fe(p, params.fe, x, round);
  auto server = server_forward(p, params.server, fe.message);
  auto be = client_forward_be(p, params.be, server.message, labels);
  return {std::move(fe), std::move(server), std::move(be)};
}

nn::ParamVector run_backward(const SplitPartition& p, const PartParams& params, const Pipeline& f,
                             const Round& round = {1, 1, 1, 0}) {
  auto be = client_backward_be(p, params.be, f.be, round);
  auto server = server_backward(p, params.server, f.server.cache, be.message);
  auto fe = client_backward_fe(p, params.fe, f.fe.cache, server.message);
  return assemble_monolithic(p, {fe, server.params, be.params}).params;
}

PartParams random_params(const SplitPartition& p, Rng& rng) {
  const auto init = init_part_params(p, 1);
  return {testing::random_like(init.fe, rng), testing::random_like(init.server, rng),
          testing::random_like(init.be, rng)};
}

}  // namespace

TEST_SUITE("partition") {
  TEST_CASE("default u-net layout") {
    const auto p = build_unet({}, 32, 32);
    REQUIRE_FALSE(p.fe.empty());
    CHECK(p.fe.front().kind == nn::LayerKind::conv2d);
    CHECK(p.be.back().kind == nn::LayerKind::argmax_output);
    int be_convs = 0;
    for (const auto& l : p.be) be_convs += l.kind == nn::LayerKind::conv2d;
    CHECK(be_convs == 2);
    CHECK(nn::output_shape(assemble_network(p)) == nn::Shape{5, 32, 32});
    CHECK(p.fe.size() + p.server.size() + p.be.size() == p.layer_count());
  }

  TEST_CASE("partition of the assembly yields identical segment names") {
    const auto p = small_unet();
    const auto net = assemble_network(p);
    const auto q = partition_network(net, p.fe.size(), p.server.size());
    CHECK(q.fe == p.fe);
    CHECK(q.server == p.server);
    CHECK(q.be == p.be);
    const auto a = init_part_params(p, 3), b = init_part_params(q, 3);
    CHECK(nn::segment_names(a.fe) == nn::segment_names(b.fe));
    CHECK(nn::segment_names(a.server) == nn::segment_names(b.server));
    CHECK(nn::segment_names(a.be) == nn::segment_names(b.be));
  }

  TEST_CASE("assembly parameter count is the sum of the parts") {
    const auto p = small_unet();
    const auto parts = init_part_params(p, 4);
    const auto mono = assemble_monolithic(p, parts);
    CHECK(mono.params.scalar_count() ==
          parts.fe.scalar_count() + parts.server.scalar_count() + parts.be.scalar_count());
    const auto back = split_params(p, mono.params);
    CHECK(back.fe == parts.fe);
    CHECK(back.server == parts.server);
    CHECK(back.be == parts.be);
    const auto client = client_params(parts);
    const auto again = with_client_params(p, client, parts.server);
    CHECK(again.fe == parts.fe);
    CHECK(again.be == parts.be);
  }

  TEST_CASE("invalid partitions") {
    const auto p = small_unet();
    const auto net = assemble_network(p);
    CHECK_THROWS_AS(partition_network(net, 0, 3), ConfigError);
    CHECK_THROWS_AS(partition_network(net, 1, net.layers.size()), ConfigError);
    auto bad = p;
    bad.be.pop_back();
    CHECK_THROWS_AS(assemble_network(bad), ConfigError);
  }
}

TEST_SUITE("split forward") {
  TEST_CASE("zero input and zero weights give zero FE activations") {
    const auto p = small_unet();
    auto params = init_part_params(p, 1);
    params.fe.scale(0.0);
    const auto fe = client_forward_fe(p, params.fe, Tensor({2, 1, 8, 8}), {1, 1, 1, 0});
    const auto& main = fe.message.payload.at(std::string(kMainSegment));
    CHECK(main.dim(0) == 2);
    for (double v : main.data()) CHECK(v == 0.0);
  }

  TEST_CASE("FE output equals the monolithic first-stage activation") {
    Rng rng(1);
    const auto p = small_unet();
    const auto params = random_params(p, rng);
    const auto mono = assemble_monolithic(p, params);
    const auto x = testing::random_tensor({2, 1, 8, 8}, rng);
    const auto fe = client_forward_fe(p, params.fe, x, {1, 1, 1, 0});
    const auto full = nn::forward(mono.network, mono.params, x);
    CHECK(fe.message.payload.at(std::string(kMainSegment)) ==
          full.cache.records[p.fe_end() - 1].output);
    CHECK(fe.message.kind == MessageKind::fe_activations);
  }

  TEST_CASE("FE then server equals the monolithic prefix bit-exactly") {
    Rng rng(2);
    const auto p = small_unet();
    const auto params = random_params(p, rng);
    const auto mono = assemble_monolithic(p, params);
    const auto x = testing::random_tensor({3, 1, 8, 8}, rng);
    const auto fe = client_forward_fe(p, params.fe, x, {1, 1, 1, 0});
    const auto sv = server_forward(p, params.server, fe.message);
    const auto full = nn::forward(mono.network, mono.params, x);
    CHECK(sv.message.payload.at(std::string(kMainSegment)) ==
          full.cache.records[p.server_end() - 1].output);
  }

  TEST_CASE("empty trunk passes activations through") {
    const auto p = small_unet();
    auto net = assemble_network(p);
    // Move the whole trunk to the back-end, leaving the server empty.
    const auto q = partition_network(net, p.fe.size(), 0);
    Rng rng(3);
    const auto params = init_part_params(q, 1);
    const auto fe = client_forward_fe(q, params.fe, testing::random_tensor({1, 1, 8, 8}, rng), {1, 1, 1, 0});
    const auto sv = server_forward(q, params.server, fe.message);
    CHECK(sv.message.payload == fe.message.payload);
  }

  TEST_CASE("split loss equals monolithic loss on random inputs") {
    Rng rng(4);
    const auto p = small_unet();
    for (int trial = 0; trial < 10; ++trial) {
      const auto params = random_params(p, rng);
      const auto mono = assemble_monolithic(p, params);
      const auto x = testing::random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
      const auto labels = testing::random_labels(128, 5, rng);
      const auto split = run_forward(p, params, x, labels);
      const auto full = nn::forward(mono.network, mono.params, x);
      CHECK(split.be.loss == nn::cross_entropy_loss(full.output, labels).loss);
      CHECK(split.be.prediction == nn::argmax_classes(full.output));
    }
  }

  TEST_CASE("constant logits predict class 0") {
    const auto p = small_unet();
    auto params = init_part_params(p, 1);
    params.be.scale(0.0);
    Rng rng(5);
    const auto labels = testing::random_labels(64, 5, rng);
    const auto f = run_forward(p, params, testing::random_tensor({1, 1, 8, 8}, rng), labels);
    for (auto c : f.be.prediction) CHECK(c == 0);
  }

  TEST_CASE("class-count and shape violations") {
    const auto p = small_unet();
    const auto params = init_part_params(p, 1);
    Rng rng(6);
    const auto x = testing::random_tensor({1, 1, 8, 8}, rng);
    std::vector<std::uint8_t> labels(64, 5);
    CHECK_THROWS_AS(run_forward(p, params, x, labels), ConfigError);
    labels.assign(63, 0);
    CHECK_THROWS_AS(run_forward(p, params, x, labels), ConfigError);
    CHECK_THROWS_AS(client_forward_fe(p, params.fe, Tensor({1, 1, 8, 4}), {}), ProtocolError);

    auto fe = client_forward_fe(p, params.fe, x, {1, 1, 1, 0});
    auto wrong = fe.message;
    wrong.kind = MessageKind::be_gradients;
    CHECK_THROWS_AS(server_forward(p, params.server, wrong), ProtocolError);
    auto reshaped = fe.message;
    reshaped.payload = {};
    reshaped.payload.add(std::string(kMainSegment), Tensor({1, 2, 8, 8}));
    CHECK_THROWS_AS(server_forward(p, params.server, reshaped), ProtocolError);
  }

  TEST_CASE("skip routes are live but never change shapes") {
    Rng rng(7);
    const auto with = small_unet(true, true);
    const auto without = small_unet(true, false);
    const auto x = testing::random_tensor({1, 1, 8, 8}, rng, 0.0, 1.0);
    const auto a = assemble_monolithic(with, init_part_params(with, 9));
    const auto b = assemble_monolithic(without, init_part_params(without, 9));
    const auto ya = nn::forward(a.network, a.params, x).output;
    const auto yb = nn::forward(b.network, b.params, x).output;
    CHECK(ya.shape() == yb.shape());
    CHECK_FALSE(ya == yb);
  }
}

TEST_SUITE("split backward") {
  TEST_CASE("gradients match the monolithic backward") {
    Rng rng(8);
    for (bool bn : {false, true}) {
      const auto p = small_unet(bn);
      const auto params = random_params(p, rng);
      const auto mono = assemble_monolithic(p, params);
      const auto x = testing::random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
      const auto labels = testing::random_labels(128, 5, rng);
      const auto split_grads = run_backward(p, params, run_forward(p, params, x, labels));
      const auto full = nn::forward(mono.network, mono.params, x);
      const auto loss = nn::cross_entropy_loss(full.output, labels);
      const auto ref = nn::backward(mono.network, mono.params, full.cache, loss.logit_gradient);
      auto diff = split_grads;
      diff.axpy(-1.0, ref.params);
      CHECK(diff.max_abs() < 1e-9);
    }
  }

  TEST_CASE("zero loss gradient gives zero gradients everywhere") {
    Rng rng(9);
    const auto p = small_unet();
    const auto params = random_params(p, rng);
    auto f = run_forward(p, params, testing::random_tensor({1, 1, 8, 8}, rng),
                         testing::random_labels(64, 5, rng));
    f.be.logit_gradient = Tensor(f.be.logit_gradient.shape());
    CHECK(run_backward(p, params, f).max_abs() == 0.0);
  }

  TEST_CASE("FE gradient matches finite differences through the pipeline") {
    Rng rng(10);
    const auto p = small_unet(false);
    const auto params = random_params(p, rng);
    const auto x = testing::random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
    const auto labels = testing::random_labels(128, 5, rng);
    const auto f = run_forward(p, params, x, labels);
    const auto mono = assemble_monolithic(p, params);
    REQUIRE(testing::kink_margin(mono.network, nn::forward(mono.network, mono.params, x).cache) > 1e-6);
    const auto grads = split_params(p, run_backward(p, params, f));
    auto objective = [&](const nn::ParamVector& fe) {
      return run_forward(p, {fe, params.server, params.be}, x, labels).be.loss;
    };
    const auto fd = nn::finite_difference_gradient(objective, params.fe, 1e-5);
    CHECK(nn::max_relative_error(grads.fe, fd, 1e-6) < 1e-4);
  }

  TEST_CASE("missing or mismatched caches are protocol errors") {
    Rng rng(11);
    const auto p = small_unet();
    const auto params = random_params(p, rng);
    const auto f = run_forward(p, params, testing::random_tensor({2, 1, 8, 8}, rng),
                               testing::random_labels(128, 5, rng));
    const auto be = client_backward_be(p, params.be, f.be, {1, 1, 1, 0});
    CHECK_THROWS_AS(server_backward(p, params.server, nn::ForwardCache{}, be.message), ProtocolError);
    CHECK_THROWS_AS(server_backward(p, params.server, f.fe.cache, be.message), ProtocolError);
    const auto sv = server_backward(p, params.server, f.server.cache, be.message);
    CHECK_THROWS_AS(client_backward_fe(p, params.fe, f.server.cache, sv.message), ProtocolError);
  }
}

TEST_SUITE("boundary encoding") {
  TEST_CASE("wire round trip") {
    Rng rng(12);
    BoundaryMessage msg{MessageKind::fe_activations, {3, 2, 7, 11}, {}};
    msg.payload.add(std::string(kMainSegment), testing::random_tensor({2, 3, 4, 4}, rng));
    msg.payload.add(skip_segment(2), testing::random_tensor({2, 1, 4, 4}, rng));
    const auto frame = encode(msg);
    CHECK(frame.substr(0, 4) == "QSF1");
    CHECK(frame[4] == 1);
    CHECK(payload_length(frame.substr(0, kWireHeaderSize)) == frame.size() - kWireHeaderSize);
    const auto back = decode(frame);
    CHECK(back.kind == msg.kind);
    CHECK(back.round == msg.round);
    CHECK(back.payload == msg.payload);
  }

  TEST_CASE("malformed frames") {
    BoundaryMessage msg{MessageKind::control, {1, 1, 1, 1}, {}};
    msg.payload.add("op.ack", Tensor({1}));
    auto frame = encode(msg);
    CHECK_THROWS_AS(decode(frame.substr(0, 10)), ProtocolError);
    CHECK_THROWS_AS(decode(frame + "z"), ProtocolError);
    auto bad_magic = frame;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode(bad_magic), ProtocolError);
    auto bad_kind = frame;
    bad_kind[4] = 42;
    CHECK_THROWS_AS(decode(bad_kind), ProtocolError);
  }

  TEST_CASE("skip segment names") {
    std::size_t src = 0;
    CHECK(parse_skip_segment(skip_segment(17), src));
    CHECK(src == 17);
    CHECK_FALSE(parse_skip_segment("main", src));
    CHECK_FALSE(parse_skip_segment("skip.", src));
    CHECK_FALSE(parse_skip_segment("skip.4x", src));
  }

  TEST_CASE("round ordering") {
    CHECK(round_follows({1, 1, 1, 0}, {1, 1, 1, 1}));
    CHECK(round_follows({1, 1, 3, 9}, {1, 1, 4, 0}));
    CHECK(round_follows({1, 1, 9, 9}, {2, 1, 0, 0}));
    CHECK_FALSE(round_follows({1, 1, 1, 1}, {1, 1, 1, 1}));
    CHECK_FALSE(round_follows({2, 1, 0, 0}, {1, 1, 5, 5}));
  }
}

namespace {

struct Fixture {
  SplitPartition partition = small_unet();
  TrunkServer server{partition};
  PartParams params = init_part_params(partition, 5);
  Rng rng{13};
  Tensor x = testing::random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
  std::vector<std::uint8_t> labels = testing::random_labels(128, 5, rng);
};

OptimizerConfig sgd(double lr) { return {nn::OptimizerKind::sgd, lr, 0.0}; }

}  // namespace

TEST_SUITE("trunk server") {
  TEST_CASE("one split step equals one monolithic sgd step") {
    Fixture f;
    InProcessTransport transport(f.server);
    SplitClient client(f.partition, 1, transport);
    client.begin_session(1, 0, sgd(0.1));
    client.load_server_weights(f.params.server);
    ClientModel model{f.params.fe, f.params.be};
    ClientOptimizers opt{nn::make_optimizer(nn::OptimizerKind::sgd, 0.1, 0.0, model.fe),
                         nn::make_optimizer(nn::OptimizerKind::sgd, 0.1, 0.0, model.be)};
    client.set_local_epoch(1);
    const double loss = client.train_batch(model, opt, f.x, f.labels);
    const auto server_after = client.fetch_server_weights();
    client.end_session();

    const auto mono = assemble_monolithic(f.partition, f.params);
    const auto fwd = nn::forward(mono.network, mono.params, f.x);
    const auto ce = nn::cross_entropy_loss(fwd.output, f.labels);
    CHECK(loss == ce.loss);
    auto expected = mono.params;
    expected.axpy(-0.1, nn::backward(mono.network, mono.params, fwd.cache, ce.logit_gradient).params);
    auto got = assemble_monolithic(f.partition, {model.fe, server_after, model.be}).params;
    got.axpy(-1.0, expected);
    CHECK(got.max_abs() < 1e-12);
  }

  TEST_CASE("evaluation leaves every weight unchanged") {
    Fixture f;
    InProcessTransport transport(f.server);
    SplitClient client(f.partition, 1, transport);
    client.begin_session(1, 0, sgd(0.1));
    client.load_server_weights(f.params.server);
    const ClientModel model{f.params.fe, f.params.be};
    const auto ev = client.evaluate(model, f.x, f.labels);
    CHECK(client.fetch_server_weights() == f.params.server);
    const auto mono = assemble_monolithic(f.partition, f.params);
    const auto out = nn::forward(mono.network, mono.params, f.x).output;
    CHECK(ev.mean_loss == nn::cross_entropy_loss(out, f.labels).loss);
    CHECK(ev.per_sample_loss.size() == 2);
    CHECK(ev.prediction == nn::argmax_classes(out));
  }

  TEST_CASE("protocol violations") {
    Fixture f;
    const auto fe = client_forward_fe(f.partition, f.params.fe, f.x, {1, 1, 1, 0});

    // No session open.
    CHECK_THROWS_AS(f.server.handle(fe.message), ProtocolError);

    f.server.handle(make_control(ControlOp::begin_session, {1, 1, 0, 0}, {0, 0.1, 0}));
    // Session open but no weights yet.
    auto early = fe.message;
    early.round = {1, 1, 0, 1};
    CHECK_THROWS_AS(f.server.handle(early), ProtocolError);

    BoundaryMessage weights{MessageKind::global_broadcast, {1, 1, 0, 2}, f.params.server};
    f.server.handle(weights);
    CHECK(f.server.active_client() == 1u);

    // A second client cannot open a session meanwhile.
    CHECK_THROWS_AS(f.server.handle(make_control(ControlOp::begin_session, {1, 2, 0, 0}, {0, 0.1, 0})),
                    ProtocolError);

    auto step = fe.message;
    step.round = {1, 1, 1, 3};
    f.server.handle(step);
    // Replayed round.
    CHECK_THROWS_AS(f.server.handle(step), ProtocolError);
    // Second forward while the first awaits its backward.
    auto second = fe.message;
    second.round = {1, 1, 1, 4};
    CHECK_THROWS_AS(f.server.handle(second), ProtocolError);

    // Incompatible weights.
    nn::ParamVector junk;
    junk.add("x", Tensor({1}));
    CHECK_THROWS_AS(f.server.handle({MessageKind::global_broadcast, {1, 1, 1, 9}, junk}), ProtocolError);
    // Kinds the server never accepts.
    CHECK_THROWS_AS(f.server.handle({MessageKind::server_gradients, {1, 1, 1, 10}, {}}), ProtocolError);
  }

  TEST_CASE("error replies surface as protocol errors on the client") {
    Fixture f;
    InProcessTransport transport(f.server);
    SplitClient client(f.partition, 1, transport);
    CHECK_THROWS_AS(client.fetch_server_weights(), ProtocolError);
    CHECK_THROWS_AS(read_control(make_error({}, "boom")), ProtocolError);
    try {
      read_control(make_error({}, "boom"));
    } catch (const ProtocolError& e) {
      CHECK(std::string(e.what()).find("boom") != std::string::npos);
    }
  }

  TEST_CASE("labels never leave the client") {
    Fixture f;
    InProcessTransport transport(f.server);
    std::vector<BoundaryMessage> seen;
    transport.set_tap([&](const BoundaryMessage& m) { seen.push_back(m); });
    SplitClient client(f.partition, 1, transport);
    client.begin_session(1, 0, sgd(0.05));
    client.load_server_weights(f.params.server);
    ClientModel model{f.params.fe, f.params.be};
    ClientOptimizers opt{nn::make_optimizer(nn::OptimizerKind::sgd, 0.05, 0.0, model.fe),
                         nn::make_optimizer(nn::OptimizerKind::sgd, 0.05, 0.0, model.be)};
    client.set_local_epoch(1);
    client.train_batch(model, opt, f.x, f.labels);
    client.evaluate(model, f.x, f.labels);
    client.end_session();

    // The mask as it would appear if sent: a float tensor of class ids.
    std::vector<double> mask(f.labels.begin(), f.labels.end());
    std::set<MessageKind> kinds;
    for (const auto& m : seen) {
      kinds.insert(m.kind);
      for (const auto& seg : m.payload) {
        CHECK(seg.name.find("label") == std::string::npos);
        CHECK(seg.name.find("mask") == std::string::npos);
        const auto data = seg.value.data();
        CHECK(std::search(data.begin(), data.end(), mask.begin(), mask.end()) == data.end());
        if (m.kind == MessageKind::fe_activations || m.kind == MessageKind::server_activations ||
            m.kind == MessageKind::server_gradients) {
          CHECK((seg.name == kMainSegment || seg.name.starts_with("skip.")));
          CHECK(seg.value.dim(0) == 2);
        }
      }
    }
    CHECK(kinds.count(MessageKind::fe_activations) == 1);
    CHECK(kinds.count(MessageKind::server_activations) == 1);
    CHECK(kinds.count(MessageKind::server_gradients) == 1);
  }
}

TEST_SUITE("tcp transport") {
  TEST_CASE("tcp and in-process runs agree bit-exactly") {
    auto train = [](bool tcp) {
      Fixture f;
      std::unique_ptr<TcpTrunkService> service;
      std::unique_ptr<Transport> transport;
      if (tcp) {
        service = std::make_unique<TcpTrunkService>(f.server);
        transport = std::make_unique<TcpTransport>("127.0.0.1", service->port());
      } else {
        transport = std::make_unique<InProcessTransport>(f.server);
      }
      SplitClient client(f.partition, 1, *transport);
      client.begin_session(1, 0, {nn::OptimizerKind::sgd_momentum, 0.05, 0.9});
      client.load_server_weights(f.params.server);
      ClientModel model{f.params.fe, f.params.be};
      ClientOptimizers opt{nn::make_optimizer(nn::OptimizerKind::sgd_momentum, 0.05, 0.9, model.fe),
                           nn::make_optimizer(nn::OptimizerKind::sgd_momentum, 0.05, 0.9, model.be)};
      std::vector<double> losses;
      for (std::uint32_t e = 1; e <= 3; ++e) {
        client.set_local_epoch(e);
        losses.push_back(client.train_batch(model, opt, f.x, f.labels));
      }
      const auto server = client.fetch_server_weights();
      client.end_session();
      transport.reset();
      if (service) service->stop();
      return std::make_tuple(losses, nn::digest(client_params({model.fe, {}, model.be})),
                             nn::digest(server));
    };
    CHECK(train(true) == train(false));
  }

  TEST_CASE("remote errors and frame limits") {
    Fixture f;
    TcpTrunkService service(f.server);
    TcpTransport transport("localhost", service.port());
    SplitClient client(f.partition, 1, transport);
    CHECK_THROWS_AS(client.fetch_server_weights(), ProtocolError);
    // The connection survives an error reply.
    client.begin_session(1, 0, sgd(0.1));
    client.load_server_weights(f.params.server);
    CHECK(client.fetch_server_weights() == f.params.server);
    client.end_session();
  }

  TEST_CASE("bad host is a configuration error") {
    CHECK_THROWS_AS(TcpTransport("not-an-address", 1), ConfigError);
  }
}
