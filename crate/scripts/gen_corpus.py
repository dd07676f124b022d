#!/usr/bin/env python3
"""Generate the bundled labelled corpus.

Every template below carries a hand-written label (tags) and the policy
variables a correct extractor must find. Variants only change parameter
values, never parameter names, so the labels hold for every variant.

Outputs (next to the core crate's tests):
  fixtures/corpus.jsonl            one labelled request per line
  fixtures/manifest.json           tag and app counts
  fixtures/json_flatten.jsonl      JSON bodies and their flattened params

Run from the repo root:  python3 scripts/gen_corpus.py
"""

import json
import random
from collections import Counter
from pathlib import Path
from urllib.parse import urlencode

SEED = 20240611
OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures"
BOUNDARY = "----flowtagBoundary7MA4YWxk"

rng = random.Random(SEED)


def word():
    return rng.choice(["alpha", "bravo", "delta", "echo", "kilo", "lima", "oscar", "tango", "zulu"])


def user():
    return f"{word()}{rng.randint(1, 999)}"


def email():
    return f"{user()}@example.org"


def sku():
    return f"{rng.choice('ABCDEFGH')}{rng.randint(1, 99)}"


def qty():
    return rng.randint(1, 6)


def small():
    return rng.choice([5, 10, 20, 25, 30, 50])


def token():
    return "".join(rng.choice("abcdef0123456789") for _ in range(24))


def sentence():
    return " ".join(word() for _ in range(rng.randint(3, 8)))


def filename():
    return f"{word()}.{rng.choice(['png', 'jpg', 'pdf', 'csv'])}"


def compact(v):
    return json.dumps(v, separators=(",", ":"), ensure_ascii=False)


def scalar_text(v):
    """Parameter value text for a JSON value: strings as is, everything else
    as compact JSON (numbers, true/false/null, arrays, objects)."""
    if isinstance(v, str):
        return v
    return compact(v)


def flatten(obj):
    out = {}
    for k, v in obj.items():
        if isinstance(v, dict):
            for ik, iv in v.items():
                out[f"{k}.{ik}"] = scalar_text(iv)
        else:
            out[k] = scalar_text(v)
    return out


def build(method, path, query=None, headers=None, body=None):
    """Returns (raw request text, body params as the proxy sees them)."""
    target = path + ("?" + urlencode(query) if query else "")
    head = [f"{method} {target} HTTP/1.1", "Host: api.example.test"]
    payload = ""
    params = {}
    if body is not None:
        kind, content = body
        if kind == "json":
            payload = compact(content)
            head.append("Content-Type: application/json")
            params = flatten(content)
        elif kind == "form":
            payload = urlencode(content)
            head.append("Content-Type: application/x-www-form-urlencoded")
            params = dict(content)
        elif kind == "multipart":
            parts = []
            for name, value in content:
                if isinstance(value, tuple):
                    fname, data = value
                    parts.append(
                        f"--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{fname}\"\r\n"
                        f"Content-Type: application/octet-stream\r\n\r\n{data}\r\n"
                    )
                    params.setdefault(name, fname)
                else:
                    parts.append(f"--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}\r\n")
                    params.setdefault(name, value)
            payload = "".join(parts) + f"--{BOUNDARY}--\r\n"
            head.append(f"Content-Type: multipart/form-data; boundary={BOUNDARY}")
        else:
            raise ValueError(kind)
    for name, value in (headers or {}).items():
        head.append(f"{name}: {value}")
    if payload or method in ("POST", "PUT", "PATCH"):
        head.append(f"Content-Length: {len(payload.encode())}")
    return "\r\n".join(head) + "\r\n\r\n" + payload, params


# Each template: (app, tags, generator). The generator returns
# (method, path, query, headers, body, expected_variables).
TEMPLATES = []


def template(app, tags):
    def wrap(fn):
        TEMPLATES.append((app, tags, fn))
        return fn

    return wrap


# ---- social / query APIs -------------------------------------------------

@template("social", ["ResponseDataLimit"])
def feed_list():
    n = small()
    return "GET", "/feed/list", {"count": n}, None, None, {"num_records": str(n)}


@template("social", ["ResponseDataLimit"])
def comment_threads():
    n = small()
    return "GET", "/commentThreads", {"part": rng.randint(1, 9), "maxResults": n}, None, None, {"num_records": str(n)}


@template("social", ["ResponseDataLimit"])
def search_query():
    n = small()
    return "GET", "/search/query", {"q": word(), "numResults": n}, None, None, {"num_records": str(n)}


@template("social", ["ResponseDataLimit", "ContainsAuthTokens"])
def timeline_with_token():
    n = small()
    return (
        "GET",
        "/v2/timeline",
        {"access_token": token(), "per_page": n},
        None,
        None,
        {"num_records": str(n)},
    )


@template("social", ["Commenting", "ContainsAuthTokens"])
def post_comment():
    text = sentence()
    return (
        "POST",
        f"/posts/{rng.randint(100, 999)}/comments",
        None,
        {"Authorization": f"Bearer {token()}"},
        ("json", {"text": text, "lang": "en"}),
        {"comment": text},
    )


@template("social", ["Commenting"])
def reply_form():
    msg = sentence()
    return (
        "POST",
        "/threads/reply",
        None,
        None,
        ("form", {"thread": str(rng.randint(1, 50)), "message": msg}),
        {"comment": msg},
    )


@template("social", ["FileUpload", "ContainsAuthTokens"])
def media_upload():
    f = filename()
    return (
        "POST",
        "/media/upload",
        None,
        {"Authorization": f"Bearer {token()}"},
        ("multipart", [("caption", sentence()), ("file", (f, "0101"))]),
        {"file_name": f},
    )


@template("social", ["FileUpload"])
def avatar_put():
    # the part name matches no synonym: tagged, but file_name is missing
    return (
        "PUT",
        f"/users/{rng.randint(1, 500)}/avatar",
        None,
        None,
        ("multipart", [("avatar", (filename(), "ffd8"))]),
        {},
    )


@template("social", ["None"])
def profile_get():
    return "GET", f"/users/{rng.randint(1, 500)}/profile", None, None, None, {}


@template("social", ["None"])
def post_get():
    return "GET", f"/posts/{rng.randint(100, 999)}", {"fields": "id,text"}, None, None, {}


@template("social", ["ContainsAuthTokens"])
def me_bearer():
    return "GET", "/me", None, {"Authorization": f"Bearer {token()}"}, None, {}


@template("social", ["None"])
def like_post():
    return "POST", f"/posts/{rng.randint(100, 999)}/like", None, None, ("json", {"value": True}), {}


# ---- finance flows ------------------------------------------------------

@template("finance", ["Login"])
def bank_login():
    u = user()
    return "POST", "/auth/login", None, None, ("form", {"username": u, "password": token()}), {"username": u}


@template("finance", ["Login"])
def signin_json():
    u = user()
    return (
        "POST",
        "/api/v1/signin",
        None,
        None,
        ("json", {"credentials": {"login": u, "secret": token()}, "remember": False}),
        {"username": u},
    )


@template("finance", ["Login"])
def session_create():
    u = user()
    return "POST", "/sessions", None, None, ("json", {"user": u, "pin": str(rng.randint(1000, 9999))}), {"username": u}


@template("finance", ["Logout", "ContainsAuthTokens"])
def bank_logout():
    return "POST", "/auth/logout", None, {"Authorization": f"Bearer {token()}"}, None, {}


@template("finance", ["Logout"])
def session_delete():
    return "DELETE", "/session", None, None, None, {}


@template("finance", ["ResponseDataLimit", "ContainsAuthTokens"])
def statements():
    n = small()
    return (
        "GET",
        f"/accounts/{rng.randint(10000, 99999)}/statements",
        {"page_size": n, "from": "2024-01-01"},
        {"Authorization": f"Bearer {token()}"},
        None,
        {"num_records": str(n)},
    )


@template("finance", ["ContainsAuthTokens"])
def transfer():
    return (
        "POST",
        "/transfers",
        None,
        {"Authorization": f"Bearer {token()}"},
        ("json", {"from": "acc-1", "to": "acc-2", "cents": rng.randint(100, 90000)}),
        {},
    )


@template("finance", ["ContainsAuthTokens"])
def balance_api_key():
    return "GET", "/balance", {"api_key": token()}, None, None, {}


@template("finance", ["UserRegistration"])
def open_account():
    e = email()
    return "POST", "/customers", None, None, ("json", {"email": e, "country": "NZ"}), {"email": e}


@template("finance", ["None"])
def rates():
    return "GET", "/fx/rates", {"base": rng.choice(["USD", "EUR", "NZD"])}, None, None, {}


@template("finance", ["FileUpload", "ContainsAuthTokens"])
def kyc_document():
    f = filename()
    return (
        "POST",
        "/kyc/documents",
        None,
        {"Authorization": f"Bearer {token()}"},
        ("multipart", [("document", (f, "2550")), ("kind", "passport")]),
        {"file_name": f},
    )


# ---- e-commerce flows ---------------------------------------------------

@template("shop", ["PurchaseProduct"])
def checkout_json():
    p, q = sku(), qty()
    return "POST", "/checkout", None, None, ("json", {"product_id": p, "quantity": q}), {"product_id": p, "quantity": str(q)}


@template("shop", ["PurchaseProduct"])
def buy_form():
    p, q = sku(), qty()
    return "POST", "/store/buy", None, None, ("form", {"sku": p, "qty": str(q)}), {"product_id": p, "quantity": str(q)}


@template("shop", ["PurchaseProduct", "ContainsAuthTokens"])
def orders_nested():
    p, q = sku(), qty()
    return (
        "POST",
        "/api/orders",
        None,
        {"Authorization": f"Bearer {token()}"},
        ("json", {"order": {"item_id": p, "amount": q, "gift": False}, "notes": None}),
        {"product_id": p, "quantity": str(q)},
    )


@template("shop", ["PurchaseProduct"])
def purchase_tickets():
    p, q = f"EVT-{rng.randint(1, 40)}", qty()
    return "POST", "/tickets/purchase", {"product": p}, None, ("form", {"units": str(q)}), {"product_id": p, "quantity": str(q)}


@template("shop", ["AddToCart"])
def cart_add():
    p, q = sku(), qty()
    return "POST", "/cart/items", None, None, ("json", {"productId": p, "quantity": q}), {"product_id": p, "quantity": str(q)}


@template("shop", ["AddToCart"])
def add_to_cart_camel():
    p, q = sku(), qty()
    return "POST", "/addToCart", None, None, ("form", {"item": p, "qty": str(q)}), {"product_id": p, "quantity": str(q)}


@template("shop", ["AddToCart"])
def basket_put():
    p = sku()
    # no quantity parameter at all
    return "PUT", f"/basket/{rng.randint(1, 999)}", None, None, ("json", {"sku": p}), {"product_id": p}


@template("shop", ["None"])
def cart_view():
    return "GET", "/cart", None, None, None, {}


@template("shop", ["None"])
def order_status():
    return "GET", f"/orders/{rng.randint(1000, 9999)}", None, None, None, {}


@template("shop", ["ResponseDataLimit"])
def product_list():
    n = small()
    return "GET", "/products", {"category": word(), "limit": n}, None, None, {"num_records": str(n)}


@template("shop", ["ResponseDataLimit"])
def product_rows():
    n = small()
    return "GET", "/catalog/export", {"rows": n, "format": "csv"}, None, None, {"num_records": str(n)}


@template("shop", ["None"])
def product_detail():
    return "GET", f"/products/{sku()}", None, None, None, {}


@template("shop", ["Commenting"])
def product_review():
    text = sentence()
    return (
        "POST",
        f"/products/{sku()}/reviews",
        None,
        None,
        ("json", {"rating": rng.randint(1, 5), "review": text}),
        {"comment": text},
    )


@template("shop", ["UserRegistration"])
def shop_register():
    u, e = user(), email()
    return (
        "POST",
        "/register",
        None,
        None,
        ("form", {"username": u, "email": e, "password": token()}),
        {"username": u, "email": e},
    )


@template("shop", ["UserRegistration"])
def signup_json():
    e = email()
    return "POST", "/api/signup", None, None, ("json", {"profile": {"email_address": e, "name": word()}}), {"email": e}


@template("shop", ["UserRegistration"])
def empty_registration():
    # the bulk-registration pattern: no username, no email
    return "POST", "/users", None, None, ("json", {"newsletter": True}), {}


@template("shop", ["Login", "ContainsAuthTokens"])
def login_with_token_param():
    u = user()
    return "POST", "/login", {"token": token()}, None, ("form", {"user": u, "password": token()}), {"username": u}


@template("shop", ["None"])
def health():
    return "GET", "/health", None, None, None, {}


@template("shop", ["None"])
def wishlist_add():
    return "POST", "/wishlist", None, None, ("json", {"sku": sku()}), {}


@template("shop", ["PurchaseProduct", "ResponseDataLimit"])
def bulk_order_preview():
    # an order endpoint that also pages its response
    p, q, n = sku(), qty(), small()
    return (
        "POST",
        "/orders/preview",
        {"limit": n},
        None,
        ("json", {"product_id": p, "quantity": q}),
        {"product_id": p, "quantity": str(q), "num_records": str(n)},
    )


@template("shop", ["FileUpload"])
def import_catalog():
    f = filename()
    return "POST", "/imports", None, None, ("json", {"file_path": f"/tmp/{f}", "dry_run": True}), {"file_name": f"/tmp/{f}"}


VARIANTS = 6


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    records = []
    flatten_cases = []
    for app, tags, gen in TEMPLATES:
        for _ in range(VARIANTS):
            method, path, query, headers, body, variables = gen()
            raw, params = build(method, path, query, headers, body)
            records.append({"raw": raw, "tags": tags, "variables": variables, "app": app, "template": gen.__name__})
            if body is not None and body[0] == "json":
                flatten_cases.append({"body": compact(body[1]), "params": params})

    tag_counts = Counter(t for r in records for t in r["tags"])
    app_counts = Counter(r["app"] for r in records)
    with open(OUT / "corpus.jsonl", "w", encoding="utf-8") as f:
        for r in records:
            f.write(compact(r) + "\n")
    with open(OUT / "json_flatten.jsonl", "w", encoding="utf-8") as f:
        for c in flatten_cases:
            f.write(compact(c) + "\n")
    manifest = {
        "records": len(records),
        "templates": len(TEMPLATES),
        "seed": SEED,
        "tags": dict(sorted(tag_counts.items())),
        "apps": dict(sorted(app_counts.items())),
    }
    with open(OUT / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"{len(records)} records from {len(TEMPLATES)} templates, {len(flatten_cases)} JSON bodies")


if __name__ == "__main__":
    main()
