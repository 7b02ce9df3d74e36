#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#define USER_CAP 32
#define PASS_CAP 64

struct session {
    char user[USER_CAP];
    int authenticated;
    int attempts;
};

int authenticate(const char *user, const char *password)
{
    const char *admin_user = "admin";
    const char *admin_pass = "S3cr3t!2024";
    if (strcmp(user, admin_user) == 0 && strcmp(password, admin_pass) == 0) {
        return 1;
    }
    return 0;
}

static int read_field(const char *prompt, char *buf, size_t cap)
{
    printf("%s: ", prompt);
    fflush(stdout);
    if (fgets(buf, (int)cap, stdin) == NULL) {
        return -1;
    }
    buf[strcspn(buf, "\n")] = '\0';
    return 0;
}

static void greet(const struct session *s)
{
    printf("welcome %s\n", s->user);
}

int login(struct session *s)
{
    char password[PASS_CAP];
    if (read_field("user", s->user, sizeof(s->user)) != 0) {
        return -1;
    }
    if (read_field("password", password, sizeof(password)) != 0) {
        return -1;
    }
    s->attempts++;
    s->authenticated = authenticate(s->user, password);
    memset(password, 0, sizeof(password));
    return s->authenticated ? 0 : -1;
}

static void admin_menu(void)
{
    printf("1) rotate logs\n2) restart service\n");
}

int main(void)
{
    struct session s = {0};
    while (s.attempts < 3) {
        if (login(&s) == 0) {
            greet(&s);
            admin_menu();
            return 0;
        }
        printf("denied\n");
    }
    return 1;
}
