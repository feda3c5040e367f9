#include <math.h>
#include <stdio.h>
#include <string.h>

#include "prosody_lab.h"

#define CHECK(cond)                                               \
    do {                                                          \
        if (!(cond)) {                                            \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            return 1;                                             \
        }                                                         \
    } while (0)

int main(void) {
    double cer = 0.0;
    CHECK(pl_cer("abcd", "abxd", &cer) == PL_OK);
    CHECK(fabs(cer - 0.25) < 1e-15);

    double r = 0.0;
    CHECK(pl_reward(0.0, 0.0, 0.0, false, 0.6, 0.4, 0.0, 1.0, 2.0, 1e-6, &r) == PL_OK);
    CHECK(fabs(r - 1.0) < 1e-15);
    CHECK(pl_reward(0.0, 0.0, 0.0, false, 0.7, 0.4, 0.0, 1.0, 2.0, 1e-6, &r) == PL_ERR_INVALID_ARGUMENT);
    char msg[256];
    size_t needed = 0;
    CHECK(pl_last_error(msg, sizeof msg, &needed) == PL_OK);
    CHECK(needed > 1);

    PlScenario *s = NULL;
    CHECK(pl_scenario_new(PL_ENV_STANDARD, &s) == PL_OK);
    PlPolicy *p = NULL;
    CHECK(pl_scenario_base_policy(s, &p) == PL_OK);
    char hash[65];
    CHECK(pl_policy_hash(p, hash, sizeof hash, &needed) == PL_OK);
    CHECK(strlen(hash) == 64);
    PlEvalSummary e;
    CHECK(pl_policy_evaluate(p, s, 2, 1.0, 1, &e) == PL_OK);
    CHECK(e.n == 64);
    pl_policy_free(p);
    pl_scenario_free(s);

    PlRatingTable *t = NULL;
    CHECK(pl_elo_new(32.0, 1000.0, &t) == PL_OK);
    CHECK(pl_elo_register(t, "a") == PL_OK);
    CHECK(pl_elo_register(t, "b") == PL_OK);
    double delta = 0.0;
    CHECK(pl_elo_vote(t, "a", "b", true, &delta) == PL_OK);
    CHECK(delta == 16.0);
    CHECK(pl_elo_vote(t, "a", "zzz", true, NULL) == PL_ERR_UNKNOWN_SYSTEM);
    pl_elo_free(t);

    printf("ok %s\n", pl_version());
    return 0;
}
