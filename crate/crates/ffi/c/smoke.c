#include <stdio.h>
#include <string.h>
#include "lmlab.h"

int main(void) {
    LmGrammar *g = NULL;
    if (lm_grammar_new("fig3", &g) != LM_STATUS_OK) return 10;
    char *tree = NULL;
    if (lm_grammar_parse(g, "y + 1 * x", &tree) != LM_STATUS_OK) return 11;
    printf("%s\n", tree);
    lm_string_free(tree);
    if (lm_grammar_parse(g, "y + +", &tree) != LM_STATUS_DATA) return 12;
    if (lm_last_error() == NULL) return 13;
    lm_grammar_free(g);

    LmModel *m = NULL;
    if (lm_model_new("vocab_size=5\np=8\nd_pos=2\nheads=2\ndepth=2\nwindow=4\n", 1, &m) != LM_STATUS_OK) return 20;
    double logits[5];
    size_t prefix[2] = {3, 4};
    if (lm_model_next_logits(m, prefix, 2, logits, 5) != LM_STATUS_OK) return 21;
    if (lm_model_new("p=8\n", 1, &m) != LM_STATUS_CONFIG) return 22;
    printf("config error: %s\n", lm_last_error());
    lm_model_free(m);
    return 0;
}
