#include <doctest.h>

#include "diffsan/anomaly.hpp"
#include "diffsan/common.hpp"
#include "synthetic_cache.hpp"
#include "test_util.hpp"

using namespace diffsan;

TEST_SUITE("anomaly") {
  TEST_CASE("transition tallies") {
    TransitionStats s = transition_stats({2, 2, 3, 1}, 4);
    CHECK(s.counts == std::vector<uint32_t>{0, 1, 2, 1});
    CHECK(s.mode == 2);
    CHECK(s.mode_count == 2);
    CHECK(s.eta == 1);
    CHECK(transition_coefficient({2, 2, 3, 1}, 4) == 1);

    // tied maxima resolve to the smaller label; eta equals the tied count
    s = transition_stats({1, 1, 2, 2}, 4);
    CHECK(s.mode == 1);
    CHECK(s.mode_count == 2);
    CHECK(s.eta == 2);

    s = transition_stats({3, 3, 3}, 4);
    CHECK(s.mode == 3);
    CHECK(s.eta == 0);

    CHECK_THROWS_AS(transition_stats({1, 4}, 4), IntegrityError);
    CHECK_THROWS_AS(transition_stats({}, 4), ConfigError);
  }

  TEST_CASE("per-sample verdicts") {
    auto verdict = [](std::vector<uint16_t> labels, uint16_t own, uint32_t tau, bool strict) {
      return classify_sample(transition_stats(labels, 4), own, tau, strict);
    };

    // enough disagreement is suspicious no matter where the mode sits
    CHECK(verdict({0, 0, 0, 1, 1, 1}, 0, 3, false).cls == SampleClass::Suspicious);
    // quiet tally, mode matches the stored label
    CHECK(verdict({2, 2, 2, 2, 2, 0}, 2, 3, false).cls == SampleClass::Benign);
    // quiet tally, mode disagrees: poisoned, consensus is the mode
    SampleVerdict v = verdict({1, 1, 1, 1, 0, 2}, 2, 3, false);
    CHECK(v.cls == SampleClass::Poisoned);
    CHECK(v.consensus == 1);
    // unanimous off-label stays poisoned even in strict mode
    v = verdict({3, 3, 3, 3, 3, 3}, 0, 3, true);
    CHECK(v.cls == SampleClass::Poisoned);
    CHECK(v.consensus == 3);
    // strict mode turns any dissent into suspicion
    CHECK(verdict({2, 2, 2, 2, 2, 0}, 2, 3, true).cls == SampleClass::Suspicious);
    CHECK(verdict({2, 2, 2, 2, 2, 2}, 2, 1, true).cls == SampleClass::Benign);
    // tau = 1 makes any dissent suspicious without the strict flag too
    CHECK(verdict({2, 2, 2, 2, 2, 0}, 2, 1, false).cls == SampleClass::Suspicious);
  }

  TEST_CASE("class letters") {
    CHECK(sample_class_letter(SampleClass::Benign) == 'B');
    CHECK(sample_class_letter(SampleClass::Poisoned) == 'P');
    CHECK(sample_class_letter(SampleClass::Suspicious) == 'S');
    for (SampleClass c :
         {SampleClass::Benign, SampleClass::Poisoned, SampleClass::Suspicious})
      CHECK(sample_class_from_letter(sample_class_letter(c)) == c);
    CHECK_THROWS_AS(sample_class_from_letter('X'), IntegrityError);
  }

  TEST_CASE("partitioning a crafted cache") {
    test::SyntheticCacheSpec spec;
    spec.n = 1;
    spec.m = 6;
    spec.num_classes = 4;
    spec.own_labels = {0, 1, 2, 3, 0};
    spec.entry_labels = {
        {0, 0, 0, 0, 0, 0},  // unanimous own
        {2, 2, 2, 2, 0, 1},  // strong off-label mode
        {0, 0, 0, 1, 1, 1},  // split between two foreign labels
        {1, 1, 2, 2, 3, 3},  // three-way tie, mode breaks low
        {0, 0, 0, 0, 0, 1},  // single dissenting entry
    };
    LabeledDataset ds = test::synthetic_dataset(spec);
    test::TempDir tmp;
    CandidateCache cache = test::write_synthetic_cache(tmp / "cache", spec, ds);

    PartitionResult part = partition_dataset(cache, ds, 3, false, false);
    REQUIRE(part.rows.size() == 5);
    CHECK(part.rows[0].cls == SampleClass::Benign);
    CHECK(part.rows[1].cls == SampleClass::Poisoned);
    CHECK(part.rows[1].consensus == 2);
    CHECK(part.rows[1].has_consensus);
    CHECK(part.rows[2].cls == SampleClass::Suspicious);
    CHECK(part.rows[3].cls == SampleClass::Poisoned);
    CHECK(part.rows[3].consensus == 1);
    CHECK(part.rows[4].cls == SampleClass::Benign);
    CHECK_FALSE(part.rows[4].has_consensus);
    CHECK(part.num_benign == 2);
    CHECK(part.num_poisoned == 2);
    CHECK(part.num_suspicious == 1);

    PartitionResult strict = partition_dataset(cache, ds, 3, true, false);
    CHECK(strict.rows[0].cls == SampleClass::Benign);
    for (int id : {1, 2, 3, 4}) CHECK(strict.rows[id].cls == SampleClass::Suspicious);
    CHECK(strict.num_suspicious == 4);

    CHECK_THROWS_AS(partition_dataset(cache, ds, 7, false, false), ConfigError);
    CHECK_THROWS_AS(partition_dataset(cache, ds, 0, false, false), ConfigError);
  }

  TEST_CASE("single-round voting ignores later rounds") {
    test::SyntheticCacheSpec spec;
    spec.n = 2;
    spec.m = 3;
    spec.num_classes = 4;
    spec.own_labels = {0, 1};
    spec.entry_labels = {
        {0, 0, 0, 1, 1, 1},  // round 1 unanimous own, round 2 flips
        {1, 1, 1, 1, 1, 1},
    };
    LabeledDataset ds = test::synthetic_dataset(spec);
    test::TempDir tmp;
    CandidateCache cache = test::write_synthetic_cache(tmp / "cache", spec, ds);

    PartitionResult full = partition_dataset(cache, ds, 3, false, false);
    CHECK(full.rows[0].cls == SampleClass::Suspicious);
    PartitionResult once = partition_dataset(cache, ds, 3, false, true);
    CHECK(once.rows[0].cls == SampleClass::Benign);
    CHECK(once.rows[1].cls == SampleClass::Benign);

    // with single-round voting, tau must fit the m entries actually tallied
    CHECK_THROWS_AS(partition_dataset(cache, ds, 4, false, true), ConfigError);
    partition_dataset(cache, ds, 4, false, false);
  }

  TEST_CASE("partition files round-trip") {
    PartitionResult part;
    part.rows = {{0, SampleClass::Benign, 0, false},
                 {1, SampleClass::Poisoned, 3, true},
                 {2, SampleClass::Suspicious, 0, false}};
    part.recount();

    test::TempDir tmp;
    save_partition(tmp / "part.tsv", part);
    PartitionResult back = load_partition(tmp / "part.tsv");
    REQUIRE(back.rows.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
      CHECK(back.rows[i].id == part.rows[i].id);
      CHECK(back.rows[i].cls == part.rows[i].cls);
      CHECK(back.rows[i].consensus == part.rows[i].consensus);
      CHECK(back.rows[i].has_consensus == part.rows[i].has_consensus);
    }
    CHECK(back.num_benign == 1);
    CHECK(back.num_poisoned == 1);
    CHECK(back.num_suspicious == 1);

    std::ofstream(tmp / "gap.tsv") << "0\tB\t-\n2\tB\t-\n";
    CHECK_THROWS_AS(load_partition(tmp / "gap.tsv"), IntegrityError);
    std::ofstream(tmp / "bad.tsv") << "0\tQ\t-\n";
    CHECK_THROWS_AS(load_partition(tmp / "bad.tsv"), IntegrityError);
    CHECK_THROWS_AS(load_partition(tmp / "absent.tsv"), IntegrityError);
  }
}
