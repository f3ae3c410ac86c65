/* Test-vector runner for the generated int8 model.
 *
 * Usage: acd_run <vectors.txt>
 *
 * Each vector line is 2*ACD_INPUT_LEN hex chars (the quantized input
 * codes), one space, and the expected top-1 class index.  The runner
 * feeds every vector through acd_infer, compares argmax of the raw
 * int8 logits, and reports per-vector results plus the static buffer
 * bytes the model actually declares.  No dynamic allocation: every
 * buffer below is sized from the emitted header at compile time.
 *
 * Exit codes: 0 all vectors match, 1 at least one mismatch,
 * 2 usage or I/O failure, 3 malformed vector file.
 */
#include <stdio.h>
#include <string.h>

#include "model.h"

/* hex input + space + class index + newline + slack */
#define LINE_CAP (2 * ACD_INPUT_LEN + 32)

static int8_t input[ACD_INPUT_LEN];
static int8_t logits[ACD_N_CLASSES];
static char line[LINE_CAP];

static int hex_nibble(int c)
{
    if (c >= '0' && c <= '9')
        return c - '0';
    if (c >= 'a' && c <= 'f')
        return c - 'a' + 10;
    if (c >= 'A' && c <= 'F')
        return c - 'A' + 10;
    return -1;
}

/* Decode 2*ACD_INPUT_LEN hex chars into input; return chars consumed
 * or -1 if the line is too short or not hex. */
static int parse_input(const char *s)
{
    int i;
    for (i = 0; i < ACD_INPUT_LEN; i++) {
        int hi = hex_nibble((unsigned char)s[2 * i]);
        int lo = hex_nibble((unsigned char)s[2 * i + 1]);
        int v;
        if (hi < 0 || lo < 0)
            return -1;
        v = hi * 16 + lo;
        input[i] = (int8_t)(v >= 128 ? v - 256 : v);
    }
    return 2 * ACD_INPUT_LEN;
}

static int argmax_logits(void)
{
    int best = 0;
    int c;
    for (c = 1; c < ACD_N_CLASSES; c++) {
        if (logits[c] > logits[best])
            best = c;
    }
    return best;
}

int main(int argc, char **argv)
{
    FILE *fh;
    int vectors = 0, failures = 0, first_bad = -1;
    unsigned long arena_bytes = (unsigned long)ACD_ARENA_BYTES;
    unsigned long sched_bytes = (unsigned long)sizeof(acd_steps);

    if (argc != 2) {
        fprintf(stderr, "usage: %s <vectors.txt>\n", argv[0]);
        return 2;
    }
    fh = fopen(argv[1], "r");
    if (fh == NULL) {
        fprintf(stderr, "cannot open %s\n", argv[1]);
        return 2;
    }
    while (fgets(line, LINE_CAP, fh) != NULL) {
        int used, expected, got;
        char *p = line;
        size_t n = strlen(line);
        if (n > 0 && line[n - 1] == '\n')
            line[n - 1] = '\0';
        if (line[0] == '\0')
            continue;
        used = parse_input(p);
        if (used < 0 || p[used] != ' ' ||
            sscanf(p + used + 1, "%d", &expected) != 1 ||
            expected < 0 || expected >= ACD_N_CLASSES) {
            fprintf(stderr, "vector %d: malformed line\n", vectors);
            fclose(fh);
            return 3;
        }
        acd_infer(input, logits);
        got = argmax_logits();
        if (got == expected) {
            printf("vector %d: expected %d got %d ok\n",
                   vectors, expected, got);
        } else {
            printf("vector %d: expected %d got %d MISMATCH\n",
                   vectors, expected, got);
            failures++;
            if (first_bad < 0)
                first_bad = vectors;
        }
        vectors++;
    }
    fclose(fh);

    printf("static bytes: arena=%lu schedule=%lu total=%lu\n",
           arena_bytes, sched_bytes, arena_bytes + sched_bytes);
    printf("parity: %d/%d\n", vectors - failures, vectors);
    if (failures > 0) {
        fprintf(stderr, "first mismatch at vector %d\n", first_bad);
        return 1;
    }
    return 0;
}
