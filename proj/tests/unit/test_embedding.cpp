#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "mcomp/embedding.hpp"
#include "mcomp/rng.hpp"

using namespace mcomp;
namespace ag = mcomp::ag;

TEST_CASE("toy tokenizer splits words and punctuation with exact offsets",
          "[embedding]") {
    const std::string text = "Hello, world!  it's 42";
    const auto toks = toy_tokenize(text);
    REQUIRE(toks.size() == 6);
    const std::vector<std::string> expect = {"Hello", ",", "world", "!", "it's", "42"};
    const std::vector<std::pair<int, int>> offs = {{0, 5},   {5, 6},   {7, 12},
                                                   {12, 13}, {15, 19}, {20, 22}};
    for (size_t i = 0; i < toks.size(); ++i) {
        CHECK(toks[i].text == expect[i]);
        CHECK(toks[i].char_start == offs[i].first);
        CHECK(toks[i].char_end == offs[i].second);
        // Offsets index the original string.
        CHECK(text.substr(size_t(toks[i].char_start),
                          size_t(toks[i].char_end - toks[i].char_start)) == toks[i].text);
    }
    CHECK(toy_tokenize("").empty());
    CHECK(toy_tokenize("   ").empty());
}

TEST_CASE("tokenization appends the end sentinel and maps spans outward",
          "[embedding]") {
    GroundedCaption cap;
    cap.text = "the red cat sat on a blue dog today";
    cap.spans = {{0, 8, 15}, {1, 21, 29}};  // "cat sat", "blue dog"
    const auto tok = tokenize_with_grounding(cap, toy_tokenize);

    REQUIRE(tok.tokens.size() == 10);  // 9 words + sentinel
    CHECK(tok.tokens.back() == kEotToken);
    REQUIRE(tok.eot_positions == std::vector<int>{9});
    CHECK(tok.token_char_ranges.back().first == int(cap.text.size()));

    REQUIRE(tok.span_token_ranges.size() == 2);
    CHECK(tok.span_token_ranges[0] == std::make_pair(2, 4));
    CHECK(tok.span_token_ranges[1] == std::make_pair(6, 8));
}

TEST_CASE("partial character overlap widens the token range outward", "[embedding]") {
    GroundedCaption cap;
    cap.text = "sunflower field nearby";
    // [3,9) covers only the tail of "sunflower": the whole token joins.
    cap.spans = {{0, 3, 9}};
    auto tok = tokenize_with_grounding(cap, toy_tokenize);
    CHECK(tok.span_token_ranges[0] == std::make_pair(0, 1));
    // [4,13) clips into "field" too: both tokens join.
    cap.spans = {{0, 4, 13}};
    tok = tokenize_with_grounding(cap, toy_tokenize);
    CHECK(tok.span_token_ranges[0] == std::make_pair(0, 2));
}

TEST_CASE("caption validation reports the first structural violation", "[embedding]") {
    GroundedCaption cap;
    cap.text = "a cat and a dog";
    cap.spans = {{0, 2, 5}, {1, 10, 15}};
    CHECK(validate_caption(cap).empty());

    GroundedCaption bad = cap;
    bad.spans[0].char_end = 99;
    CHECK(validate_caption(bad) == "span for object 0 out of text bounds");
    bad = cap;
    bad.spans[1].object_index = 0;
    CHECK(validate_caption(bad) == "duplicate span for object 0");
    bad = cap;
    bad.spans = {{0, 2, 8}, {1, 6, 12}};
    CHECK(validate_caption(bad) == "overlapping spans for objects 0 and 1");
    bad = cap;
    bad.spans[0].object_index = -2;
    CHECK_FALSE(validate_caption(bad).empty());

    // A span covering only whitespace maps to no token.
    GroundedCaption ws;
    ws.text = "a b";
    ws.spans = {{0, 1, 2}};
    CHECK_THROWS_AS(tokenize_with_grounding(ws, toy_tokenize), std::invalid_argument);
}

TEST_CASE("caption json round-trips text and spans", "[embedding]") {
    GroundedCaption cap;
    cap.text = "two things";
    cap.spans = {{0, 0, 3}, {1, 4, 10}};
    const GroundedCaption back = caption_from_json(caption_to_json(cap));
    CHECK(back.text == cap.text);
    REQUIRE(back.spans.size() == 2);
    CHECK(back.spans[1].object_index == 1);
    CHECK(back.spans[1].char_start == 4);
    CHECK(back.spans[1].char_end == 10);
}

TEST_CASE("embedding plan splices object blocks directly after their spans",
          "[embedding]") {
    GroundedCaption cap;
    cap.text = "the red cat sat on a blue dog today";
    cap.spans = {{0, 8, 15}, {1, 21, 29}};  // token ranges [2,4) and [6,8)
    const auto tok = tokenize_with_grounding(cap, toy_tokenize);
    const int k = 2;
    const EmbeddingLayout plan = plan_embedding(tok, {0, 1}, k, 2);

    // 10 text tokens + 2 blocks of 2.
    REQUIRE(plan.length == 14);
    CHECK(plan.slot_sets[0] == std::vector<int>{2, 3, 4, 5});
    CHECK(plan.slot_sets[1] == std::vector<int>{8, 9, 10, 11});
    REQUIRE(plan.eot_positions == std::vector<int>{13});

    CHECK(plan.provenance[3].kind == SlotKind::text);
    CHECK(plan.provenance[4].kind == SlotKind::object);
    CHECK(plan.provenance[4].object_index == 0);
    CHECK(plan.provenance[10].object_index == 1);
    CHECK(plan.provenance[13].kind == SlotKind::eot);

    // Identical plan when the block list arrives in reverse order.
    const EmbeddingLayout rev = plan_embedding(tok, {1, 0}, k, 2);
    CHECK(rev.slot_sets == plan.slot_sets);
    CHECK(rev.eot_positions == plan.eot_positions);
}

TEST_CASE("blocks without spans follow the sentinel ordered by object index",
          "[embedding]") {
    const auto tok = tokenize_with_grounding(GroundedCaption{}, toy_tokenize);
    REQUIRE(tok.tokens == std::vector<std::string>{kEotToken});
    const EmbeddingLayout plan = plan_embedding(tok, {1, 0}, 2, 2);
    REQUIRE(plan.length == 5);
    CHECK(plan.eot_positions == std::vector<int>{0});
    CHECK(plan.slot_sets[0] == std::vector<int>{1, 2});
    CHECK(plan.slot_sets[1] == std::vector<int>{3, 4});
}

TEST_CASE("assembled sequence rows come from the declared sources", "[embedding]") {
    GroundedCaption cap;
    cap.text = "the red cat sat on a blue dog today";
    cap.spans = {{0, 8, 15}, {1, 21, 29}};
    const auto tok = tokenize_with_grounding(cap, toy_tokenize);
    const int d = 3, k = 2;
    Tensor text_emb({int(tok.tokens.size()), d});
    for (int r = 0; r < text_emb.shape[0]; ++r)
        for (int c = 0; c < d; ++c) text_emb.at(r, c) = double(r);
    std::vector<ObjectTokenBlock> blocks;
    for (int obj = 0; obj < 2; ++obj)
        blocks.push_back({obj, Tensor::full({k, d}, 100.0 + obj)});

    const MultimodalEmbedding emb = build_multimodal_embedding(tok, text_emb, blocks, 2);
    REQUIRE(emb.sequence.shape[0] == 14);
    REQUIRE(emb.sequence.shape[1] == d);
    int next_text = 0;
    for (int p = 0; p < 14; ++p) {
        const SlotTag tag = emb.provenance[size_t(p)];
        if (tag.kind == SlotKind::object) {
            CHECK(emb.sequence.at(p, 0) == 100.0 + tag.object_index);
        } else {
            CHECK(emb.sequence.at(p, 0) == double(next_text));
            ++next_text;
        }
    }
    CHECK(next_text == int(tok.tokens.size()));

    // Structural mismatches are rejected with diagnosable errors.
    Tensor short_emb({3, d});
    CHECK_THROWS_AS(build_multimodal_embedding(tok, short_emb, blocks, 2),
                    std::invalid_argument);
    std::vector<ObjectTokenBlock> bad = blocks;
    bad[1].tokens = Tensor({k, d + 1});
    CHECK_THROWS_AS(build_multimodal_embedding(tok, text_emb, bad, 2),
                    std::invalid_argument);
    bad = blocks;
    bad[1].tokens = Tensor({k + 1, d});
    CHECK_THROWS_AS(build_multimodal_embedding(tok, text_emb, bad, 2),
                    std::invalid_argument);
}

TEST_CASE("text encoder is deterministic per token string", "[embedding]") {
    ToyTextEncoder enc;
    const Tensor a = enc({"cat", "dog", "cat"});
    REQUIRE(a.shape == std::vector<int>({3, enc.dim}));
    double diff01 = 0.0, diff02 = 0.0;
    for (int d = 0; d < enc.dim; ++d) {
        diff01 = std::max(diff01, std::abs(a.at(0, d) - a.at(1, d)));
        diff02 = std::max(diff02, std::abs(a.at(0, d) - a.at(2, d)));
    }
    CHECK(diff01 > 1e-6);   // distinct tokens get distinct vectors
    CHECK(diff02 == 0.0);   // same token, same vector
    const Tensor b = enc({"cat"});
    for (int d = 0; d < enc.dim; ++d) CHECK(b.at(0, d) == a.at(0, d));
}

TEST_CASE("image encoder projects patches and rejects wrong geometry", "[embedding]") {
    ToyImageEncoder enc;
    Image img(enc.image_size, enc.image_size, 3);
    for (auto& v : img.data) v = 0.5;
    const Tensor feats = enc(img);
    REQUIRE(feats.shape == std::vector<int>({16, enc.dim}));
    // A constant image makes every patch identical, so every row matches.
    for (int p = 1; p < 16; ++p)
        for (int d = 0; d < enc.dim; ++d)
            CHECK(feats.at(p, d) == Catch::Approx(feats.at(0, d)).margin(1e-12));
    // Row 0 equals 0.5 * column-sums of the projection.
    const Tensor w = enc.projection();
    for (int d = 0; d < enc.dim; ++d) {
        double s = 0.0;
        for (int k = 0; k < w.shape[0]; ++k) s += 0.5 * w.at(k, d);
        CHECK(feats.at(0, d) == Catch::Approx(s).margin(1e-9));
    }
    Image wrong(16, 16, 3);
    CHECK_THROWS_AS(enc(wrong), std::invalid_argument);
}

TEST_CASE("adaptor output matches an explicit per-token perceptron oracle",
          "[embedding]") {
    const int p = 4, d_enc = 3, hidden = 5, d = 4, k = 2;
    Rng rng(0x61646170);
    AdaptorParams a = AdaptorParams::init(d_enc, hidden, d, k, p, rng);
    for (auto& v : a.b1.data) v = rng.normal() * 0.1;
    for (auto& v : a.b2.data) v = rng.normal() * 0.1;
    a.pool = Tensor::randn({k, p}, rng, 0.5);
    const Tensor x = Tensor::randn({p, d_enc}, rng);

    // Independent re-derivation with plain loops.
    Tensor tokens({p, d});
    for (int t = 0; t < p; ++t) {
        std::vector<double> h(size_t(hidden), 0.0);
        for (int j = 0; j < hidden; ++j) {
            double s = a.b1.at(j);
            for (int i = 0; i < d_enc; ++i) s += x.at(t, i) * a.w1.at(i, j);
            h[size_t(j)] = s / (1.0 + std::exp(-s));  // silu
        }
        for (int o = 0; o < d; ++o) {
            double s = a.b2.at(o);
            for (int j = 0; j < hidden; ++j) s += h[size_t(j)] * a.w2.at(j, o);
            tokens.at(t, o) = s;
        }
    }
    Tensor expect({k, d});
    for (int r = 0; r < k; ++r)
        for (int o = 0; o < d; ++o) {
            double s = 0.0;
            for (int t = 0; t < p; ++t) s += a.pool.at(r, t) * tokens.at(t, o);
            expect.at(r, o) = s;
        }

    const Tensor got = adaptor_forward_plain(x, a);
    REQUIRE(got.shape == expect.shape);
    for (int r = 0; r < k; ++r)
        for (int o = 0; o < d; ++o)
            CHECK(got.at(r, o) == Catch::Approx(expect.at(r, o)).margin(1e-9));

    // One-hot pooling rows select single perceptron outputs exactly.
    AdaptorParams sel = a;
    sel.pool = Tensor({k, p});
    sel.pool.at(0, 2) = 1.0;
    sel.pool.at(1, 0) = 1.0;
    const Tensor picked = adaptor_forward_plain(x, sel);
    for (int o = 0; o < d; ++o) {
        CHECK(picked.at(0, o) == Catch::Approx(tokens.at(2, o)).margin(1e-9));
        CHECK(picked.at(1, o) == Catch::Approx(tokens.at(0, o)).margin(1e-9));
    }
}

TEST_CASE("object encoding tags blocks and wraps encoder failures", "[embedding]") {
    Rng rng(0x656e636f);
    AdaptorParams a = AdaptorParams::init(32, 8, 6, 2, 16, rng);
    ToyImageEncoder enc;
    Image ok(enc.image_size, enc.image_size, 3);
    const auto blocks = encode_objects({ok, ok}, enc, a);
    REQUIRE(blocks.size() == 2);
    CHECK(blocks[0].object_index == 0);
    CHECK(blocks[1].object_index == 1);
    CHECK(blocks[0].tokens.shape == std::vector<int>({2, 6}));

    Image bad(7, 7, 3);
    CHECK_THROWS_WITH(encode_objects({ok, bad}, enc, a),
                      Catch::Matchers::ContainsSubstring("object 1"));
}

TEST_CASE("modality dropout clears the right inputs and honors the guard",
          "[embedding]") {
    ConditioningInputs in;
    in.caption.text = "a cat";
    in.caption.spans = {{0, 2, 5}};
    in.object_images = {Image(8, 8, 3)};

    Rng rng(1);
    const ConditioningInputs kept = drop_modalities(in, rng, 0.0);
    CHECK_FALSE(kept.text_dropped);
    CHECK_FALSE(kept.images_dropped);
    CHECK(kept.caption.text == "a cat");
    CHECK(kept.object_images.size() == 1);

    const ConditioningInputs gone = drop_modalities(in, rng, 1.0);
    CHECK(gone.text_dropped);
    CHECK(gone.images_dropped);
    CHECK(gone.caption.text.empty());
    CHECK(gone.caption.spans.empty());
    CHECK(gone.object_images.empty());

    // Guard: a draw that would drop both keeps the images.
    const ConditioningInputs guarded = drop_modalities(in, rng, 1.0, true);
    CHECK(guarded.text_dropped);
    CHECK_FALSE(guarded.images_dropped);
    CHECK(guarded.object_images.size() == 1);

    CHECK_THROWS_AS(drop_modalities(in, rng, 1.5), std::invalid_argument);

    // Empirical rate sanity check at p = 0.3.
    Rng stat(0x73746174);
    int text_drops = 0, image_drops = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const auto out = drop_modalities(in, stat, 0.3);
        text_drops += out.text_dropped ? 1 : 0;
        image_drops += out.images_dropped ? 1 : 0;
    }
    CHECK(std::abs(text_drops / double(n) - 0.3) < 0.01);
    CHECK(std::abs(image_drops / double(n) - 0.3) < 0.01);
}
