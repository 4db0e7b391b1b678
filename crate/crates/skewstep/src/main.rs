fn main() {
    println!("skewstep");
}
