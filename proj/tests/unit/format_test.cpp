#include "doctest.h"
#include "support.hpp"

#include "wilke/harness.hpp"
#include "wilke/tensor_io.hpp"
#include "wilke/tokenizer.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

using namespace wilke;
namespace fs = std::filesystem;

namespace {

fs::path scratch_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "wilke_unit";
  fs::create_directories(dir);
  return dir / name;
}

bool same_bits(const ModelF& a, const ModelF& b) {
  std::vector<std::uint8_t> x = serialize_weights(a), y = serialize_weights(b);
  return x == y;
}

}  // namespace

TEST_CASE("container round trip is bitwise exact") {
  ModelF m = ModelF::random(test::small_config(3, 16, 2, 40), 8, 0.3);
  m.blocks[1].proj_w(0, 0) = -0.0f;
  m.blocks[2].fc_b(3) = std::numeric_limits<float>::denorm_min();
  const fs::path p = scratch_file("round_trip.st");
  save_weights(m, p);
  const LoadedModel back = load_weights(p);
  CHECK(back.missing.empty());
  CHECK(back.extra.empty());
  CHECK(back.model.config == m.config);
  CHECK(same_bits(m, back.model));
  CHECK(std::signbit(back.model.blocks[1].proj_w(0, 0)));

  save_weights(back.model, scratch_file("round_trip2.st"));
  CHECK(file_checksum(p) == file_checksum(scratch_file("round_trip2.st")));
}

TEST_CASE("fixture container written by the reference script") {
  const TensorContainer c = read_container(test::data_dir() / "tiny_model.st");
  const ModelConfig cfg = config_from_metadata(c.metadata);
  CHECK(cfg.n_layers == 2);
  CHECK(cfg.d_model == 8);
  CHECK(cfg.d_mlp == 16);
  CHECK(cfg.n_heads == 2);
  CHECK(cfg.vocab_size == 12);
  CHECK(c.tensors.at("tok_emb").shape == std::vector<std::int64_t>{12, 8});
  const ModelF m = load_weights(test::data_dir() / "tiny_model.st").model;
  const std::vector<float> raw = c.read_f32("blocks.1.mlp.proj.w");
  CHECK(std::memcmp(raw.data(), m.blocks[1].proj_w.data(), raw.size() * sizeof(float)) == 0);
}

TEST_CASE("malformed containers are rejected") {
  const ModelF m = ModelF::random(test::small_config(1, 8, 2, 12), 1);
  std::vector<std::uint8_t> bytes = serialize_weights(m);

  SUBCASE("truncated payload") {
    bytes.resize(bytes.size() - 4);
    CHECK_THROWS_AS(parse_container(bytes), FormatError);
  }
  SUBCASE("header length past the end") {
    bytes[7] = 0x7f;
    CHECK_THROWS_AS(parse_container(bytes), FormatError);
  }
  SUBCASE("too short for a header") {
    bytes.resize(5);
    CHECK_THROWS_AS(parse_container(bytes), FormatError);
  }
}

TEST_CASE("tensor names and config must agree") {
  const ModelF m = ModelF::random(test::small_config(1, 8, 2, 12), 1);
  const fs::path p = scratch_file("mismatch.st");
  save_weights(m, p);
  ModelConfig other = m.config;
  other.d_model = 16;
  other.d_mlp = 64;
  CHECK_THROWS(load_weights(p, other));
}

TEST_CASE("BPE matches the reference merges") {
  const Tokenizer tok = Tokenizer::from_files(test::data_dir() / "bpe_vocab.json", test::data_dir() / "bpe_merges.txt");
  std::ifstream in(test::data_dir() / "oracles.json");
  const auto j = nlohmann::json::parse(in);
  for (const auto& [text, ids] : j["bpe"].items()) {
    INFO(text);
    CHECK(tok.encode(text) == ids.get<Tokens>());
    CHECK(tok.decode(ids.get<Tokens>()) == text);
  }
}

TEST_CASE("decode inverts encode") {
  const Tokenizer bpe = Tokenizer::from_files(test::data_dir() / "bpe_vocab.json", test::data_dir() / "bpe_merges.txt");
  const Tokenizer bytes;
  std::mt19937_64 rng(5);
  const std::string alphabet = "the lowernw  'sx,.!\n\t0123";
  for (int i = 0; i < 300; ++i) {
    std::string s(rng() % 24, ' ');
    for (auto& ch : s) ch = alphabet[rng() % alphabet.size()];
    CHECK(bpe.decode(bpe.encode(s)) == s);
    CHECK(bytes.decode(bytes.encode(s)) == s);
  }
  const std::string utf8 = "caf\xc3\xa9 \xe2\x82\xac";
  CHECK(bpe.decode(bpe.encode(utf8)) == utf8);
  CHECK(bytes.encode("AB") == Tokens{65, 66});
}

TEST_CASE("Darrieux fixture parses to the published fields") {
  const auto recs = parse_records(darrieux_fixture());
  REQUIRE(recs.size() == 1);
  const KnowledgeRecord& r = recs[0];
  CHECK(r.prompt == "The mother tongue of {} is");
  CHECK(r.subject == "Danielle Darrieux");
  CHECK(r.target_new == "English");
  CHECK(r.target_true == "French");
  CHECK(r.relation_id == "P103");
  CHECK(r.paraphrase_prompts == std::vector<std::string>{"[Irrelevant Context]. Danielle Darrieux spoke the language"});
  CHECK(r.neighborhood_prompts == std::vector<std::string>{"The native language of Montesquieu is"});
  CHECK(r.request().prompt() == "The mother tongue of Danielle Darrieux is");

  const auto again = parse_records(record_to_json(r));
  REQUIRE(again.size() == 1);
  CHECK(again[0].paraphrase_prompts == r.paraphrase_prompts);
  CHECK(again[0].neighborhood_prompts == r.neighborhood_prompts);
}

TEST_CASE("record parsing reports the bad field") {
  CHECK_THROWS_AS(parse_records(R"({"case_id": 1, "requested_rewrite": {}})"), Error);
  CHECK_THROWS_AS(parse_records("{not json"), Error);
}
