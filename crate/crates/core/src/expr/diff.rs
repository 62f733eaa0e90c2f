use super::{binop, BinOp, Func, Node};

fn num(v: f64) -> Node {
    Node::Num(v)
}

fn bin(op: BinOp, a: Node, b: Node) -> Node {
    Node::Bin(op, Box::new(a), Box::new(b))
}

fn call(f: Func, a: Node) -> Node {
    Node::Call(f, Box::new(a))
}

/// Raw derivative; callers simplify afterwards.
pub(super) fn differentiate(n: &Node, var: usize) -> Node {
    use BinOp::*;
    match n {
        Node::Num(_) => num(0.0),
        Node::Var(i) => num(if *i == var { 1.0 } else { 0.0 }),
        Node::Neg(e) => Node::Neg(Box::new(differentiate(e, var))),
        Node::Bin(op, a, b) => {
            let (a, b) = (a.as_ref(), b.as_ref());
            match op {
                Add | Sub => bin(*op, differentiate(a, var), differentiate(b, var)),
                Mul => bin(
                    Add,
                    bin(Mul, differentiate(a, var), b.clone()),
                    bin(Mul, a.clone(), differentiate(b, var)),
                ),
                Div => bin(
                    Div,
                    bin(
                        Sub,
                        bin(Mul, differentiate(a, var), b.clone()),
                        bin(Mul, a.clone(), differentiate(b, var)),
                    ),
                    bin(Pow, b.clone(), num(2.0)),
                ),
                Pow => {
                    if !b.mentions(var) {
                        // b * a^(b-1) * a'
                        bin(
                            Mul,
                            bin(
                                Mul,
                                b.clone(),
                                bin(Pow, a.clone(), bin(Sub, b.clone(), num(1.0))),
                            ),
                            differentiate(a, var),
                        )
                    } else if !a.mentions(var) {
                        // a^b * log(a) * b'
                        bin(
                            Mul,
                            bin(Mul, n.clone(), call(Func::Log, a.clone())),
                            differentiate(b, var),
                        )
                    } else {
                        // a^b * (b' log a + b a'/a)
                        bin(
                            Mul,
                            n.clone(),
                            bin(
                                Add,
                                bin(Mul, differentiate(b, var), call(Func::Log, a.clone())),
                                bin(Div, bin(Mul, b.clone(), differentiate(a, var)), a.clone()),
                            ),
                        )
                    }
                }
            }
        }
        Node::Call(f, a) => {
            let inner = differentiate(a, var);
            let a = a.as_ref().clone();
            let outer = match f {
                Func::Exp => n.clone(),
                Func::Sin => call(Func::Cos, a),
                Func::Cos => Node::Neg(Box::new(call(Func::Sin, a))),
                Func::Sqrt => bin(Div, num(0.5), n.clone()),
                Func::Log => bin(Div, num(1.0), a),
            };
            bin(BinOp::Mul, outer, inner)
        }
    }
}

/// Constant folding and 0/1 elimination, plus collection of numeric factors
/// at the front of products.
pub(super) fn simplify(n: Node) -> Node {
    use BinOp::*;
    match n {
        Node::Num(_) | Node::Var(_) => n,
        Node::Neg(e) => match simplify(*e) {
            Node::Num(v) => num(-v),
            Node::Neg(inner) => *inner,
            other => Node::Neg(Box::new(other)),
        },
        Node::Call(f, a) => {
            let a = simplify(*a);
            if let Node::Num(v) = a {
                if let Ok(r) = f.apply(v) {
                    if r.is_finite() {
                        return num(r);
                    }
                }
            }
            call(f, a)
        }
        Node::Bin(op, a, b) => {
            let a = simplify(*a);
            let b = simplify(*b);
            if let (Node::Num(x), Node::Num(y)) = (&a, &b) {
                if let Ok(r) = binop(op, *x, *y) {
                    if r.is_finite() {
                        return num(r);
                    }
                }
            }
            let is = |n: &Node, v: f64| matches!(n, Node::Num(x) if *x == v);
            match op {
                Add if is(&a, 0.0) => b,
                Add | Sub if is(&b, 0.0) => a,
                Sub if is(&a, 0.0) => simplify(Node::Neg(Box::new(b))),
                Mul if is(&a, 0.0) || is(&b, 0.0) => num(0.0),
                Mul if is(&a, 1.0) => b,
                Mul if is(&b, 1.0) => a,
                Mul => fold_product(a, b),
                Div if is(&a, 0.0) => num(0.0),
                Div if is(&b, 1.0) => a,
                Pow if is(&b, 0.0) => num(1.0),
                Pow if is(&b, 1.0) => a,
                Pow if is(&a, 1.0) => num(1.0),
                _ => bin(op, a, b),
            }
        }
    }
}

fn fold_product(a: Node, b: Node) -> Node {
    // Move a numeric factor to the front and merge it with a leading
    // numeric factor of the other operand.
    let (c, rest) = match (a, b) {
        (Node::Num(c), rest) | (rest, Node::Num(c)) => (c, rest),
        (a, b) => return bin(BinOp::Mul, a, b),
    };
    match rest {
        Node::Bin(BinOp::Mul, x, y) if matches!(*x, Node::Num(_)) => {
            let Node::Num(k) = *x else { unreachable!() };
            let prod = c * k;
            if prod == 1.0 {
                *y
            } else {
                bin(BinOp::Mul, num(prod), *y)
            }
        }
        rest => bin(BinOp::Mul, num(c), rest),
    }
}
