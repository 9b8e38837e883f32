#include <doctest.h>

#include "convplan/error.hpp"
#include "convplan/io.hpp"
#include "convplan/planner.hpp"
#include "convplan/synth.hpp"

using namespace convplan;

TEST_CASE("network round trip is the identity on canonical text") {
  for (std::uint64_t seed = 1; seed < 20; ++seed) {
    const auto g = synth::random_network(seed);
    const auto text = io::serialize_network(g);
    CHECK(io::serialize_network(io::parse_network(text)) == text);
  }
  for (const char* name : {"mesh2k", "res3b", "small", "single"}) {
    const auto g = io::load_network(std::string(CONVPLAN_NETS_DIR "/") + name + ".json");
    const auto text = io::serialize_network(g);
    CHECK(io::serialize_network(io::parse_network(text)) == text);
  }
}

TEST_CASE("network defaults") {
  const auto g = io::parse_network(R"({"layers": [
    {"id": "x", "kind": "input", "n": 1, "c": 2, "h": 9, "w": 9},
    {"id": "c", "kind": "conv", "parents": ["x"], "filters": 3, "kernel": 5},
    {"id": "p", "kind": "pool", "parents": ["c"], "mode": "average"}]})");
  CHECK(g.layer(1).conv().padding() == 2);
  CHECK(g.layer(1).conv().stride() == 1);
  CHECK(g.layer(2).pool().window == Window{2, 2, 0});
  CHECK(g.output_shape(2) == TensorShape{1, 3, 4, 4});
}

TEST_CASE("malformed networks") {
  CHECK_THROWS_AS(io::parse_network("{"), ParseError);
  CHECK_THROWS_AS(io::parse_network(R"({"layers": {}})"), ParseError);
  CHECK_THROWS_AS(io::parse_network(R"({"layers": [{"id": "x", "kind": "input", "n": 1,
      "c": 1, "h": 4, "w": 4, "colour": 3}]})"),
                  ParseError);
  CHECK_THROWS_AS(io::parse_network(R"({"layers": [{"id": "x", "kind": "input", "n": 1,
      "c": 1, "h": 4, "w": 4}, {"id": "c", "kind": "conv", "parents": ["x"], "filters": 1,
      "kernel": 4}]})"),
                  GraphError);
}

TEST_CASE("machine round trip") {
  const auto m = io::parse_machine(R"({"ranks": 8, "node_size": 4, "alpha_intra": 1e-6,
      "alpha_inter": 3e-6, "beta_intra": 1e-11, "beta_inter": 5e-11})");
  CHECK(m.word_bytes == 4);
  const auto again = io::parse_machine(io::serialize_machine(m));
  CHECK(again.ranks == 8);
  CHECK(again.alpha_inter == m.alpha_inter);
  CHECK(again.beta_intra == m.beta_intra);
  const auto defaulted = io::parse_machine(R"({"ranks": 2, "alpha_intra": 1, "beta_intra": 2})");
  CHECK(defaulted.node_size == 2);
  CHECK(defaulted.alpha_inter == 1);
  CHECK_THROWS_AS(io::parse_machine(R"({"ranks": 0, "alpha_intra": 1, "beta_intra": 2})"), ParseError);
  CHECK_THROWS_AS(io::parse_machine(R"({"ranks": 2, "alpha_intra": -1, "beta_intra": 2})"), ParseError);
}

TEST_CASE("strategy round trip") {
  const auto g = synth::random_network(3);
  std::mt19937_64 rng(3);
  const auto s = random_strategy(g, 4, rng);
  REQUIRE(s);
  CHECK(io::parse_strategy(g, io::serialize_strategy(g, *s)) == *s);
  CHECK_THROWS_AS(io::parse_strategy(g, R"({"layers": {"ghost": {}}})"), ParseError);
  CHECK_THROWS_AS(io::parse_strategy(g, R"({"layers": {}})"), ParseError);
}

TEST_CASE("planned strategy files load back") {
  const auto g = io::load_network(CONVPLAN_NETS_DIR "/small.json");
  const auto m = io::load_machine(CONVPLAN_NETS_DIR "/machine4.json");
  const auto c = generate_candidates(g, m);
  const auto t = io::load_cost_table(CONVPLAN_NETS_DIR "/small_costs.csv");
  const auto s = plan_line(g, c, m, t);
  CHECK(io::parse_strategy(g, io::serialize_strategy(g, s)) == s.assignment);
}

TEST_CASE("cost table round trip") {
  CostTable t;
  t.set({CostOp::fp, 1, 3, 8, 8, 4, 3, 1, 1}, 1.0 / 3.0);
  t.set({CostOp::bp_filter, 2, 3, 8, 8, 4, 3, 2, 1}, 2.5e-7);
  const auto back = io::parse_cost_table(io::serialize_cost_table(t));
  CHECK(back.entries() == t.entries());
  CHECK_THROWS_AS(io::parse_cost_table("op,n,c,h,w,f,k,s,pad,seconds\nfp,1,1,1\n"), ParseError);
  CHECK_THROWS_AS(io::parse_cost_table("op,n,c,h,w,f,k,s,pad,seconds\nzz,1,1,1,1,1,1,1,0,1\n"),
                  ParseError);
  CHECK_THROWS_AS(io::parse_cost_table("nope\n"), ParseError);
}

TEST_CASE("bench shapes") {
  const auto shapes = io::parse_bench_shapes("n,c,h,w,f,k,s,pad\n1,3,16,16,4,3,1,1\n");
  REQUIRE(shapes.size() == 1);
  CHECK(shapes[0].h == 16);
  CHECK(shapes[0].pad == 1);
}
